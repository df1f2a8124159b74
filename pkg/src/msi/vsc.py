"""Semantic-guided visual sequence compression.

A token sequence ``V`` (N x d) is scored against an anchor built from its own
mean-pooled summary plus an external semantic vector. Tokens scoring at or
above ``gamma`` are kept; every other token is folded into the kept token it
is most similar to, so the output is shorter but loses no rows outright.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import as_matrix, l2_normalize_rows, mean_pool_rows


@dataclass
class VscConfig:
    tau: float = 1.0
    gamma: float = 0.0
    alpha: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"vsc.tau must be > 0, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"vsc.alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class FusedAnchor:
    m_cls: np.ndarray
    v_cls: np.ndarray
    g_cls: np.ndarray


@dataclass
class PartitionResult:
    relevant_indices: list[int]
    irrelevant_indices: list[int]
    similarities: np.ndarray
    merged: np.ndarray
    # (original irrelevant row index, position within relevant_indices)
    merge_map: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return len(self.relevant_indices) / len(self.similarities)


def fuse_semantic(v_cls, g_cls) -> FusedAnchor:
    v = np.asarray(v_cls, dtype=np.float64)
    g = np.asarray(g_cls, dtype=np.float64)
    if v.shape != g.shape:
        raise ShapeError(f"visual semantic {v.shape} and guidance {g.shape} differ")
    return FusedAnchor(m_cls=v + g, v_cls=v, g_cls=g)


def score_tokens(v, anchor: FusedAnchor, cfg: VscConfig) -> np.ndarray:
    v = as_matrix(v, "token sequence")
    m = anchor.m_cls
    if v.shape[1] != m.shape[0]:
        raise ShapeError(f"token width {v.shape[1]} != anchor width {m.shape[0]}")
    if cfg.normalize:
        # zero-norm rows/anchor give cosine 0
        return (l2_normalize_rows(v) @ l2_normalize_rows(m)) / cfg.tau
    return (v @ m) / cfg.tau


def partition(scores, gamma: float) -> tuple[list[int], list[int]]:
    scores = np.asarray(scores, dtype=np.float64)
    keep = scores >= gamma
    if not keep.any():
        keep[int(np.argmax(scores))] = True
    idx = np.arange(scores.size)
    return idx[keep].tolist(), idx[~keep].tolist()


def merge_irrelevant(z_r, z_lr, alpha: float, irrelevant_ids=None):
    """Fold each row of ``z_lr`` into its best-matching row of ``z_r``.

    Rows are processed in order; the target is the argmax raw dot product
    against the *current* relevant rows (lowest position wins ties), and is
    replaced by ``alpha * target + (1 - alpha) * row``. Returns the merged
    matrix and a ``(irrelevant id, relevant position)`` list, where ids
    default to the row numbers of ``z_lr``.
    """
    merged = as_matrix(z_r, "relevant tokens").copy()
    z_lr = np.asarray(z_lr, dtype=np.float64).reshape(-1, merged.shape[1])
    if irrelevant_ids is None:
        irrelevant_ids = range(z_lr.shape[0])
    merge_map = []
    for i, row in zip(irrelevant_ids, z_lr):
        j = int(np.argmax(merged @ row))
        merged[j] = alpha * merged[j] + (1.0 - alpha) * row
        merge_map.append((int(i), j))
    return merged, merge_map


def replay_merges(v, relevant_indices, merge_map, alpha: float) -> np.ndarray:
    """Rebuild the merged sequence from the raw tokens and a recorded merge map."""
    v = as_matrix(v)
    out = v[list(relevant_indices)].copy()
    for i, j in merge_map:
        out[j] = alpha * out[j] + (1.0 - alpha) * v[i]
    return out


def routing_matrix(n: int, relevant_indices, merge_map, alpha: float) -> np.ndarray:
    """Coefficients ``R`` (L x N) with ``merged == R @ V`` for a fixed partition.

    Used to send gradients back through the merge with the routing held fixed.
    """
    r = np.zeros((len(relevant_indices), n))
    r[np.arange(len(relevant_indices)), relevant_indices] = 1.0
    for i, j in merge_map:
        r[j] *= alpha
        r[j, i] += 1.0 - alpha
    return r


def compress(v, g_cls, cfg: VscConfig | None = None) -> PartitionResult:
    cfg = cfg or VscConfig()
    v = as_matrix(v, "token sequence")
    anchor = fuse_semantic(mean_pool_rows(v), g_cls)
    scores = score_tokens(v, anchor, cfg)
    rel, irr = partition(scores, cfg.gamma)
    merged, merge_map = merge_irrelevant(v[rel], v[irr], cfg.alpha, irrelevant_ids=irr)
    return PartitionResult(rel, irr, scores, merged, merge_map)


def calibrate_gamma(score_sets, background_sets) -> float:
    """Threshold that best splits known foreground tokens (kept) from background (pruned).

    ``score_sets`` holds one score vector per sequence and ``background_sets``
    the matching ground-truth background indices. Among thresholds with the
    fewest misplaced tokens, the one sitting in the widest score gap wins.
    """
    fg, bg = [], []
    for scores, background in zip(score_sets, background_sets):
        mask = np.zeros(len(scores), dtype=bool)
        mask[list(background)] = True
        bg.extend(np.asarray(scores)[mask])
        fg.extend(np.asarray(scores)[~mask])
    if not fg or not bg:
        raise ValueError("calibration needs both foreground and background tokens")
    values = np.unique(np.concatenate([fg, bg]))
    fg, bg = np.sort(fg), np.sort(bg)
    best = None
    for lo, hi in zip(values[:-1], values[1:]):
        cut = 0.5 * (lo + hi)
        errors = np.searchsorted(fg, cut) + (len(bg) - np.searchsorted(bg, cut))
        key = (errors, -(hi - lo))
        if best is None or key < best[0]:
            best = (key, cut)
    return float(best[1]) if best else float(values[0])
