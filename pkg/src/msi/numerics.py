"""Dense float64 primitives with hand-written backward passes.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. Every
backward in the package is verified against :func:`finite_difference_check`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GradCheckError, ShapeError, StateError

PROB_FLOOR = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def l2_normalize_rows(m, epsilon: float = 1e-12) -> np.ndarray:
    """Scale each row to unit Euclidean norm; rows with norm < epsilon pass through."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    safe = np.where(norms < epsilon, 1.0, norms)
    return m / safe


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"vector lengths differ: {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        # zero vectors carry no direction; treat as orthogonal
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def layer_norm(x, gain, shift, epsilon: float = 1e-5) -> np.ndarray:
    """Normalize over the last axis, then apply ``gain`` and ``shift``."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + epsilon) * gain + shift


def layer_norm_backward(dy, x, gain, epsilon: float = 1e-5):
    """Return ``(dx, dgain, dshift)``; leading axes of ``x`` are summed for the parameters."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + epsilon)
    xhat = (x - mu) * inv
    dxhat = dy * gain
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    lead = tuple(range(x.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def mean_pool_rows(m) -> np.ndarray:
    return as_matrix(m).mean(axis=0)


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p, y: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.shape[-1]:
        raise IndexError(f"class index {y} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[y], PROB_FLOOR)))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch of logits and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    p = softmax(logits)
    loss = float(np.mean([cross_entropy(p[i], int(labels[i])) for i in range(n)]))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class LinearLayer:
    """Affine map ``y = x W^T + b`` on a vector or a batch of row vectors."""

    def __init__(self, weight, bias):
        self.weight = as_matrix(weight, "weight").copy()
        self.bias = np.asarray(bias, dtype=np.float64).copy()
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        self._x = None

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "LinearLayer":
        w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
        return cls(w, np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"input width {x.shape[-1]} != layer input {self.n_in}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dy):
        """Return ``(dweight, dbias, dx)`` for the most recent forward."""
        if self._x is None:
            raise StateError("LinearLayer.backward called before forward")
        x2 = np.atleast_2d(self._x)
        dy2 = np.atleast_2d(np.asarray(dy, dtype=np.float64))
        dx = (dy2 @ self.weight).reshape(self._x.shape)
        return dy2.T @ x2, dy2.sum(axis=0), dx


@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    parameter_count: int
    passed: bool
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
            "parameter_count": self.parameter_count,
            "pass": self.passed,
            "tolerance": self.tolerance,
        }


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    analytic_grad,
    point,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``point``.

    The relative error of coordinate k is ``|a_k - n_k| / max(|a_k|, |n_k|, floor)``;
    ``floor`` keeps coordinates whose true gradient is zero from being judged on
    round-off alone.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64).ravel()
    a = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if a.shape != x.shape:
        raise ShapeError(f"gradient has {a.size} entries, point has {x.size}")
    numeric = np.empty_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + step
        fp = f(x.copy())
        x[k] = orig - step
        fm = f(x.copy())
        x[k] = orig
        for val in (fp, fm):
            if not np.isfinite(val):
                raise GradCheckError(k, float(val))
        numeric[k] = (fp - fm) / (2.0 * step)
    abs_err = np.abs(a - numeric)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    max_abs = float(abs_err.max()) if x.size else 0.0
    max_rel = float(rel_err.max()) if x.size else 0.0
    return GradCheckReport(max_abs, max_rel, int(x.size), bool(max_rel < tolerance), tolerance)
