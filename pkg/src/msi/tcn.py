"""Dilated causal temporal convolution stack.

Batched sequences of unequal length are left-padded with zeros and every layer
re-zeroes the padded steps, which makes the batched result identical to
running each sequence on its own with causal zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .numerics import as_matrix


@dataclass
class TcnLayerConfig:
    kernel_size: int
    dilation: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel_size < 1 or self.dilation < 1:
            raise ConfigError("kernel_size and dilation must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")

    @property
    def span(self) -> int:
        return (self.kernel_size - 1) * self.dilation


class TcnLayer:
    """One causal conv layer; ``weight`` has shape (K, C_in, C_out)."""

    def __init__(self, cfg: TcnLayerConfig, weight, bias):
        self.cfg = cfg
        self.weight = np.asarray(weight, dtype=np.float64).copy()
        self.bias = np.asarray(bias, dtype=np.float64).copy()
        want = (cfg.kernel_size, cfg.in_channels, cfg.out_channels)
        if self.weight.shape != want or self.bias.shape != (cfg.out_channels,):
            raise ShapeError(f"weights {self.weight.shape}/{self.bias.shape} do not fit layer {want}")

    @classmethod
    def init(cls, cfg: TcnLayerConfig, rng: np.random.Generator) -> "TcnLayer":
        fan_in = cfg.kernel_size * cfg.in_channels
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cfg.kernel_size, cfg.in_channels, cfg.out_channels))
        return cls(cfg, w, np.zeros(cfg.out_channels))


def _shift(x: np.ndarray, s: int) -> np.ndarray:
    """Delay along the time axis (axis -2) by ``s`` steps with zero fill."""
    if s == 0:
        return x
    out = np.zeros_like(x)
    if s < x.shape[-2]:
        out[..., s:, :] = x[..., :-s, :]
    return out


def _unshift(g: np.ndarray, s: int) -> np.ndarray:
    """Adjoint of :func:`_shift`."""
    if s == 0:
        return g
    out = np.zeros_like(g)
    if s < g.shape[-2]:
        out[..., :-s, :] = g[..., s:, :]
    return out


def _conv(x: np.ndarray, layer: TcnLayer) -> np.ndarray:
    if x.shape[-1] != layer.cfg.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, layer expects {layer.cfg.in_channels}")
    y = np.broadcast_to(layer.bias, x.shape[:-1] + (layer.cfg.out_channels,)).copy()
    for k in range(layer.cfg.kernel_size):
        y += _shift(x, k * layer.cfg.dilation) @ layer.weight[k]
    return y


def causal_conv(x, layer: TcnLayer) -> np.ndarray:
    """y(t) = b + sum_k x(t - k*dilation) @ W[k], with x(t) = 0 for t < 0."""
    return _conv(as_matrix(x, "sequence"), layer)


def receptive_field(layers) -> int:
    layers = list(layers)
    if not layers:
        raise ConfigError("empty stack has no receptive field")
    return 1 + sum((l.cfg if isinstance(l, TcnLayer) else l).span for l in layers)


class TcnStack:
    """Stacked causal convolutions with ReLU between layers and temporal pooling.

    Forward/backward share cached state, so one instance must not be driven
    from two threads at once.
    """

    def __init__(self, layers: list[TcnLayer], pooling: str = "last", residual: bool = False):
        if not layers:
            raise ConfigError("a TCN stack needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.cfg.out_channels != b.cfg.in_channels:
                raise ConfigError(f"channel mismatch between layers: {a.cfg.out_channels} -> {b.cfg.in_channels}")
        if pooling not in ("last", "mean"):
            raise ConfigError(f"pooling must be 'last' or 'mean', got {pooling!r}")
        self.layers = layers
        self.pooling = pooling
        self.residual = residual
        self._cache = None

    @classmethod
    def build(cls, in_channels: int, channels, kernel_size: int, dilations, rng: np.random.Generator,
              pooling: str = "last", residual: bool = False) -> "TcnStack":
        channels = list(channels)
        dilations = list(dilations)
        if len(channels) != len(dilations):
            raise ConfigError("tcn channels and dilations must have equal length")
        layers = []
        c_in = in_channels
        for c_out, d in zip(channels, dilations):
            layers.append(TcnLayer.init(TcnLayerConfig(kernel_size, d, c_in, c_out), rng))
            c_in = c_out
        return cls(layers, pooling=pooling, residual=residual)

    @property
    def in_channels(self) -> int:
        return self.layers[0].cfg.in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].cfg.out_channels

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.layers)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"tcn.{i}.weight"] = layer.weight
            out[f"tcn.{i}.bias"] = layer.bias
        return out

    def _uses_residual(self, layer: TcnLayer) -> bool:
        return self.residual and layer.cfg.in_channels == layer.cfg.out_channels

    def sequence_outputs(self, x) -> np.ndarray:
        """Per-step outputs of the whole stack for one sequence (T x C_out)."""
        x = as_matrix(x, "sequence")
        h = x[None]
        for n, layer in enumerate(self.layers):
            z = _conv(h, layer)
            a = np.maximum(z, 0.0) if n < len(self.layers) - 1 else z
            h = a + h if self._uses_residual(layer) else a
        return h[0]

    def forward_batch(self, seqs) -> np.ndarray:
        """Pool each sequence in ``seqs`` (list of T_b x C) to one row; returns B x C_out."""
        if not seqs:
            raise ShapeError("empty batch")
        lengths = np.array([len(s) for s in seqs])
        if lengths.min() < 1:
            raise ShapeError("every sequence needs at least one step")
        t_max = int(lengths.max())
        x = np.zeros((len(seqs), t_max, self.in_channels))
        for b, s in enumerate(seqs):
            s = as_matrix(s, "sequence")
            if s.shape[1] != self.in_channels:
                raise ShapeError(f"sequence has {s.shape[1]} channels, stack expects {self.in_channels}")
            x[b, t_max - len(s):] = s
        mask = (np.arange(t_max)[None, :] >= (t_max - lengths)[:, None])[..., None].astype(np.float64)

        h = x
        steps = []
        last = len(self.layers) - 1
        for n, layer in enumerate(self.layers):
            z = _conv(h, layer) * mask
            a = np.maximum(z, 0.0) if n < last else z
            out = a + h if self._uses_residual(layer) else a
            steps.append((h, z))
            h = out
        if self.pooling == "last":
            pooled = h[:, -1, :]
        else:
            pooled = (h * mask).sum(axis=1) / lengths[:, None]
        self._cache = (steps, mask, lengths, [len(s) for s in seqs])
        return pooled

    def forward(self, x) -> np.ndarray:
        return self.forward_batch([x])[0]

    def backward_batch(self, upstream):
        """Gradients for the last :meth:`forward_batch`.

        Returns ``(param_grads, input_grads)``: a dict keyed like :meth:`params`
        and a list of per-sequence input gradients (T_b x C_in).
        """
        if self._cache is None:
            raise StateError("TcnStack.backward called before forward")
        steps, mask, lengths, raw_lengths = self._cache
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        b, t_max = mask.shape[0], mask.shape[1]
        g = np.zeros((b, t_max, self.out_channels))
        if self.pooling == "last":
            g[:, -1, :] = upstream
        else:
            g = mask * (upstream / lengths[:, None])[:, None, :]

        grads = {}
        last = len(self.layers) - 1
        for n in range(last, -1, -1):
            layer = self.layers[n]
            h_in, z = steps[n]
            dh_in = g.copy() if self._uses_residual(layer) else np.zeros_like(h_in)
            dz = g * (z > 0) if n < last else g
            dz = dz * mask
            dw = np.empty_like(layer.weight)
            for k in range(layer.cfg.kernel_size):
                s = k * layer.cfg.dilation
                xs = _shift(h_in, s)
                dw[k] = np.einsum("bti,bto->io", xs, dz)
                dh_in += _unshift(dz @ layer.weight[k].T, s)
            grads[f"tcn.{n}.weight"] = dw
            grads[f"tcn.{n}.bias"] = dz.sum(axis=(0, 1))
            g = dh_in
        inputs = [g[i, t_max - L:] for i, L in enumerate(raw_lengths)]
        return grads, inputs

    def backward(self, upstream):
        grads, inputs = self.backward_batch(np.asarray(upstream)[None])
        return grads, inputs[0]


def tcn_forward(x, stack: TcnStack) -> np.ndarray:
    return stack.forward(x)


def tcn_backward(upstream, stack: TcnStack):
    return stack.backward(upstream)
