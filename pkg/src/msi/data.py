"""Feature files, synthetic multimodal data, frame sampling and fold splits.

MSIF layout (little-endian)::

    "MSIF" u16 version u32 n_records u32 n_classes u32 text_dim u32 audio_dim u32 frame_dim
    per record: u16 id_len, id (UTF-8), u32 label, u32 n_frames,
                f32 text[text_dim], f32 audio[audio_dim], f32 frames[n_frames * frame_dim]
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

MSIF_MAGIC = b"MSIF"
MSIF_VERSION = 1
_HEADER = struct.Struct("<4sHIIIII")
_F32 = np.dtype("<f4")


@dataclass
class FeatureRecord:
    id: str
    label: int
    text: np.ndarray
    audio: np.ndarray
    frames: np.ndarray
    # ground-truth background frame indices; known only for generated data, never serialized
    background: tuple[int, ...] | None = field(default=None, compare=False)

    def __eq__(self, other):
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and np.array_equal(self.text, other.text)
                and np.array_equal(self.audio, other.audio)
                and np.array_equal(self.frames, other.frames))


@dataclass
class Dataset:
    records: list[FeatureRecord]
    num_classes: int
    text_dim: int
    audio_dim: int
    frame_dim: int

    def __len__(self):
        return len(self.records)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.num_classes,
                       self.text_dim, self.audio_dim, self.frame_dim)

    def find(self, record_id: str) -> FeatureRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise KeyError(f"no record with id {record_id!r}")

    def validate(self):
        for r in self.records:
            if not 0 <= r.label < self.num_classes:
                raise ShapeError(f"record {r.id!r}: label {r.label} outside [0, {self.num_classes})")
            if r.text.shape != (self.text_dim,) or r.audio.shape != (self.audio_dim,):
                raise ShapeError(f"record {r.id!r}: text/audio dims {r.text.shape}/{r.audio.shape} "
                                 f"do not match header ({self.text_dim}, {self.audio_dim})")
            if r.frames.ndim != 2 or r.frames.shape[1] != self.frame_dim or r.frames.shape[0] < 1:
                raise ShapeError(f"record {r.id!r}: frames shape {r.frames.shape} does not match frame_dim {self.frame_dim}")
            for arr in (r.text, r.audio, r.frames):
                if not np.all(np.isfinite(arr)):
                    raise ShapeError(f"record {r.id!r} contains non-finite values")


def encode_dataset(ds: Dataset) -> bytes:
    ds.validate()
    parts = [_HEADER.pack(MSIF_MAGIC, MSIF_VERSION, len(ds.records), ds.num_classes,
                          ds.text_dim, ds.audio_dim, ds.frame_dim)]
    for r in ds.records:
        rid = r.id.encode("utf-8")
        if len(rid) > 0xFFFF:
            raise ShapeError(f"record id too long ({len(rid)} bytes)")
        parts.append(struct.pack("<H", len(rid)) + rid)
        parts.append(struct.pack("<II", r.label, r.frames.shape[0]))
        for arr in (r.text, r.audio, r.frames):
            parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: need {n} bytes for {what}, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype=_F32).astype(np.float64)


def decode_dataset(buf: bytes) -> Dataset:
    rd = _Reader(buf)
    magic, version, n, c, qt, qa, d = _HEADER.unpack(rd.take(_HEADER.size, "header"))
    if magic != MSIF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MSIF_MAGIC!r}", 0)
    if version != MSIF_VERSION:
        raise FormatError(f"unsupported MSIF version {version}", 4)
    records = []
    for k in range(n):
        start = rd.pos
        (id_len,) = rd.unpack("<H", f"record {k} id length")
        try:
            rid = rd.take(id_len, f"record {k} id").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"record {k} id is not valid UTF-8", start + 2) from e
        label, t = rd.unpack("<II", f"record {k} label/frame count")
        if label >= c:
            raise FormatError(f"record {k} label {label} >= declared classes {c}", rd.pos - 8)
        text = rd.floats(qt, f"record {k} text")
        audio = rd.floats(qa, f"record {k} audio")
        frames = rd.floats(t * d, f"record {k} frames").reshape(t, d)
        records.append(FeatureRecord(rid, int(label), text, audio, frames))
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after {n} declared records", rd.pos)
    return Dataset(records, c, qt, qa, d)


def read_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


@dataclass
class SyntheticSpec:
    classes: int = 3
    samples_per_class: int = 20
    text_dim: int = 16
    audio_dim: int = 16
    frame_dim: int = 16
    frames: int = 15
    separation: float = 4.0
    noise: float = 0.5
    background_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("classes", "samples_per_class", "text_dim", "audio_dim", "frame_dim", "frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")
        if not self.separation > 0:
            raise ConfigError("data.separation must be > 0")
        if self.noise < 0:
            raise ConfigError("data.noise must be >= 0")
        if not 0.0 <= self.background_fraction < 1.0:
            raise ConfigError("data.background_fraction must lie in [0, 1)")

    @property
    def background_count(self) -> int:
        # round first so 0.3 * 10 counts as 3, not 4
        return math.ceil(round(self.background_fraction * self.frames, 9))


def _class_means(rng: np.random.Generator, classes: int, dim: int, separation: float) -> np.ndarray:
    """Random class centres rescaled so the closest pair sits exactly ``separation`` apart."""
    raw = rng.normal(size=(classes, dim))
    if classes == 1:
        return raw * (separation / np.linalg.norm(raw))
    dist = np.linalg.norm(raw[:, None] - raw[None], axis=-1)
    closest = dist[np.triu_indices(classes, 1)].min()
    return raw * (separation / closest)


def _f32(x: np.ndarray) -> np.ndarray:
    # keep in-memory values representable on disk so write/read is lossless
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    mu_t = _class_means(rng, spec.classes, spec.text_dim, spec.separation)
    mu_a = _class_means(rng, spec.classes, spec.audio_dim, spec.separation)
    mu_f = _class_means(rng, spec.classes, spec.frame_dim, spec.separation)
    bg_scale = np.linalg.norm(mu_f, axis=1).mean() / np.sqrt(spec.frame_dim)
    n_bg = spec.background_count

    records = []
    for s in range(spec.samples_per_class):
        for c in range(spec.classes):
            text = mu_t[c] + spec.noise * rng.normal(size=spec.text_dim)
            audio = mu_a[c] + spec.noise * rng.normal(size=spec.audio_dim)
            frames = mu_f[c] + spec.noise * rng.normal(size=(spec.frames, spec.frame_dim))
            bg = np.sort(rng.choice(spec.frames, size=n_bg, replace=False))
            frames[bg] = bg_scale * rng.normal(size=(n_bg, spec.frame_dim))
            records.append(FeatureRecord(
                id=f"s{len(records):05d}", label=c, text=_f32(text), audio=_f32(audio),
                frames=_f32(frames), background=tuple(int(i) for i in bg)))
    return Dataset(records, spec.classes, spec.text_dim, spec.audio_dim, spec.frame_dim)


def sample_indices(t: int, k: int) -> np.ndarray:
    if t < 1 or k < 1:
        raise ShapeError(f"need t >= 1 and k >= 1, got t={t}, k={k}")
    return (np.arange(k) * t) // k


def sample_frames(frames, k: int) -> np.ndarray:
    """Pick ``k`` rows at stride ``T/k`` (index ``floor(i*T/k)``), repeating rows when T < k."""
    frames = np.asarray(frames, dtype=np.float64)
    return frames[sample_indices(frames.shape[0], k)]


def kfold_split(n: int, k: int, seed: int) -> np.ndarray:
    """Fold id per sample: seeded shuffle, then round-robin assignment."""
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if n < k:
        raise ConfigError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds
