"""MSCK checkpoint container.

Layout (little-endian)::

    "MSCK" u16 version u32 meta_len  meta (UTF-8 JSON: config, step, optimizer step, rng state)
    u32 n_tensors, then per tensor: u16 name_len, name, u16 ndim, u32 dims[ndim], f64 data
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import FormatError, MsiError
from .model import Model

MSCK_MAGIC = b"MSCK"
MSCK_VERSION = 1
_F64 = np.dtype("<f8")


def _tensors(model: Model) -> dict[str, np.ndarray]:
    out = dict(model.params())
    for name in out.copy():
        if name in model.optimizer.m:
            out[f"adam.m.{name}"] = model.optimizer.m[name]
            out[f"adam.v.{name}"] = model.optimizer.v[name]
    return out


def encode_checkpoint(model: Model) -> bytes:
    meta = {
        "config": asdict(model.cfg),
        "step": model.step,
        "optimizer_step": model.optimizer.t,
        "rng": model.rng.bit_generator.state,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MSCK_MAGIC, struct.pack("<HI", MSCK_VERSION, len(meta_bytes)), meta_bytes]
    tensors = _tensors(model)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<H{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def decode_checkpoint(buf: bytes) -> Model:
    from .config import model_config_from_dict

    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MSCK_MAGIC:
        raise FormatError("bad magic, expected b'MSCK'", 0)
    version, meta_len = struct.unpack("<HI", take(6, "version"))
    if version != MSCK_VERSION:
        raise FormatError(f"unsupported MSCK version {version}", 4)
    meta_at = pos
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
        cfg = model_config_from_dict(meta["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, MsiError) as e:
        raise FormatError(f"unreadable checkpoint metadata: {e}", meta_at) from e

    model = Model(cfg)
    (n,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<H", take(2, f"{name} rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(8 * count, f"{name} data"), dtype=_F64).reshape(shape).copy()
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)

    params = model.params()
    missing = set(params) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks parameters {sorted(missing)}")
    for name, arr in params.items():
        if tensors[name].shape != arr.shape:
            raise FormatError(f"{name}: stored shape {tensors[name].shape} != configured {arr.shape}")
        arr[...] = tensors[name]
        if f"adam.m.{name}" in tensors:
            model.optimizer.m[name] = tensors[f"adam.m.{name}"]
            model.optimizer.v[name] = tensors[f"adam.v.{name}"]
    model.step = int(meta["step"])
    model.optimizer.t = int(meta["optimizer_step"])
    model.rng.bit_generator.state = meta["rng"]
    return model


def load_checkpoint(path) -> Model:
    return decode_checkpoint(Path(path).read_bytes())
