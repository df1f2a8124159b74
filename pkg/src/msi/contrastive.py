"""Label-masked cross-modal contrastive loss with its analytic gradient.

Anchor row i (fused text+audio projection) is pulled toward target row i
(video projection of the same sample) and pushed away from target rows whose
label differs. Same-label off-diagonal pairs are left out of the loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StateError
from .numerics import LinearLayer, as_matrix, l2_normalize_rows, relu


@dataclass
class MaskPair:
    positive: np.ndarray
    negative: np.ndarray


@dataclass
class SimilarityGrid:
    sims: np.ndarray       # cos(anchor_i, target_j) / tau
    exp_sims: np.ndarray   # exp(sims), populated only where it enters the loss


def build_masks(labels) -> MaskPair:
    labels = np.asarray(labels).ravel()
    if labels.size < 1:
        raise ShapeError("need at least one label")
    pos = labels[:, None] == labels[None, :]
    return MaskPair(positive=pos, negative=~pos)


def _check_batch(anchor, target, labels):
    a = as_matrix(anchor, "anchor")
    t = as_matrix(target, "target")
    labels = np.asarray(labels).ravel()
    if a.shape != t.shape or labels.shape[0] != a.shape[0]:
        raise ShapeError(f"anchor {a.shape}, target {t.shape} and {labels.shape[0]} labels must agree")
    if a.shape[0] < 2:
        raise ShapeError(f"contrastive loss needs a batch of at least 2, got {a.shape[0]}")
    return a, t, labels


def _cosines(a: np.ndarray, t: np.ndarray):
    ah = l2_normalize_rows(a)
    th = l2_normalize_rows(t)
    return np.clip(ah @ th.T, -1.0, 1.0), ah, th


def _row_terms(sims: np.ndarray, negative: np.ndarray):
    """Per-row log-partition over {diagonal} U {negatives} and the softmax weights."""
    used = negative.copy()
    np.fill_diagonal(used, True)
    masked = np.where(used, sims, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(used, np.exp(masked - m), 0.0)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    return lse, np.where(used, np.exp(masked - lse[:, None]), 0.0), used


def contrastive_loss(anchor, target, labels, tau: float) -> tuple[float, SimilarityGrid]:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    a, t, labels = _check_batch(anchor, target, labels)
    b = a.shape[0]
    cos, _, _ = _cosines(a, t)
    sims = cos / tau
    lse, _, used = _row_terms(sims, build_masks(labels).negative)
    row_loss = lse - np.diag(sims)
    loss = float(row_loss.sum() / (b * (b - 1)))
    with np.errstate(over="ignore"):
        # diagnostic copy only; may be inf for tiny tau while the loss stays finite
        exp_sims = np.where(used, np.exp(sims), 0.0)
    return loss, SimilarityGrid(sims=sims, exp_sims=exp_sims)


def similarity_grad(anchor, target, labels, tau: float) -> np.ndarray:
    """dL/dsims; diagonal entries are the positive-pair terms."""
    a, t, labels = _check_batch(anchor, target, labels)
    b = a.shape[0]
    cos, _, _ = _cosines(a, t)
    _, p, _ = _row_terms(cos / tau, build_masks(labels).negative)
    g = p.copy()
    g[np.diag_indices(b)] -= 1.0
    return g / (b * (b - 1))


def contrastive_grad(anchor, target, labels, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`contrastive_loss` w.r.t. ``anchor`` and ``target``."""
    a, t, labels = _check_batch(anchor, target, labels)
    cos, ah, th = _cosines(a, t)
    g = similarity_grad(a, t, labels, tau) / tau  # dL/dcos
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nt = np.linalg.norm(t, axis=1, keepdims=True)
    gc = g * cos
    da = (g @ th - gc.sum(axis=1, keepdims=True) * ah) / np.where(na > 0, na, 1.0)
    dt = (g.T @ ah - gc.sum(axis=0)[:, None] * th) / np.where(nt > 0, nt, 1.0)
    # cosine against a zero vector is pinned to 0, so it carries no gradient
    da[na[:, 0] == 0] = 0.0
    dt[nt[:, 0] == 0] = 0.0
    return da, dt


class ProjectionHead:
    """Linear map followed by ReLU; maps features into the contrastive space."""

    def __init__(self, linear: LinearLayer):
        self.linear = linear
        self._z = None

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "ProjectionHead":
        return cls(LinearLayer.init(n_in, n_out, rng))

    def forward(self, x) -> np.ndarray:
        self._z = self.linear.forward(x)
        return relu(self._z)

    def backward(self, dy):
        if self._z is None:
            raise StateError("ProjectionHead.backward called before forward")
        return self.linear.backward(np.asarray(dy) * (self._z > 0))


def project(features, head: ProjectionHead) -> np.ndarray:
    features = as_matrix(features, "features")
    if features.shape[1] != head.linear.n_in:
        raise ShapeError(f"features have width {features.shape[1]}, head expects {head.linear.n_in}")
    return head.forward(features)
