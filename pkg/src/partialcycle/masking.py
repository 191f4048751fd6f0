"""Pseudo-matches from soft matchings, and the diagonal masks that mark existing cycles.

Masks are built on plain numpy values; no gradient flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DiffMatrix, ShapeError
from .cycles import TemperatureConfig, adaptive_tau

THRESHOLD = 0.5


@dataclass
class PartialMatching:
    """0/1 matrix with at most one 1 per row and column.

    ``strict=False`` relaxes the check to the smaller view only, which is
    all a thresholded softmax can promise.
    """

    i: int
    j: int
    p: np.ndarray
    strict: bool = True

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.int64)
        if self.p.ndim != 2:
            raise ShapeError("matching must be a matrix")
        if not ((self.p == 0) | (self.p == 1)).all():
            raise ShapeError("matching entries must be 0/1")
        if not self.p.size:
            return
        rows, cols = self.p.sum(axis=1).max(), self.p.sum(axis=0).max()
        if self.strict and (rows > 1 or cols > 1):
            raise ShapeError("matching has a row or column with more than one match")
        n_i, n_j = self.p.shape
        ok = (rows <= 1 and n_i <= n_j) or (cols <= 1 and n_j <= n_i)
        if not ok:
            raise ShapeError("an element of the smaller view has more than one match")

    @property
    def T(self) -> "PartialMatching":
        return PartialMatching(self.j, self.i, self.p.T.copy(), self.strict)


@dataclass
class CycleMask:
    anchor_view: int
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.int64).reshape(-1)
        if not ((self.d == 0) | (self.d == 1)).all():
            raise ShapeError("mask entries must be 0/1")

    def matrix(self) -> np.ndarray:
        return np.diag(self.d).astype(np.float64)


def _softmax_rows(s: np.ndarray, tau: float) -> np.ndarray:
    z = tau * s
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pseudo_matches(s, i: int = 0, j: int = 1, cfg: TemperatureConfig = TemperatureConfig(),
                   tau: float | None = None) -> PartialMatching:
    """Binarise the soft matching taken along the smaller view.

    Rows are softmaxed when n_i <= n_j, columns otherwise. Each softmax row
    exceeds one half at most once, so every element of the smaller view gets
    at most one partner; two of them may still share a partner in the larger
    view, hence the non-strict result.
    """
    if isinstance(s, DiffMatrix):
        s = s.value
    s = np.asarray(s, dtype=np.float64)
    n_i, n_j = s.shape
    if n_i == 0 or n_j == 0:
        return PartialMatching(i, j, np.zeros((n_i, n_j), dtype=np.int64), strict=False)
    if n_i <= n_j:
        t = adaptive_tau(n_j, cfg) if tau is None else tau
        p = _softmax_rows(s, t) > THRESHOLD
    else:
        t = adaptive_tau(n_i, cfg) if tau is None else tau
        p = (_softmax_rows(s.T, t) > THRESHOLD).T
    return PartialMatching(i, j, p.astype(np.int64), strict=False)


def _check_chain(p_ij, p_jk, p_ki):
    a, b, c = p_ij.p.shape, p_jk.p.shape, p_ki.p.shape
    if not (a[1] == b[0] and b[1] == c[0] and c[1] == a[0]):
        raise ShapeError(f"matchings do not chain: {a}, {b}, {c}")


def pseudo_mask(p_ij: PartialMatching, p_jk: PartialMatching, p_ki: PartialMatching) -> CycleMask:
    """Diagonal mask of detections in view i whose three-view chain closes (vectorised)."""
    _check_chain(p_ij, p_jk, p_ki)
    closed = p_ij.p @ p_jk.p @ p_ki.p
    return CycleMask(p_ij.i, (np.diag(closed) >= 1).astype(np.int64))


def pseudo_mask_enumerated(p_ij: PartialMatching, p_jk: PartialMatching,
                           p_ki: PartialMatching) -> CycleMask:
    """Same mask as :func:`pseudo_mask`, by explicit search over (b, c)."""
    _check_chain(p_ij, p_jk, p_ki)
    n_i = p_ij.p.shape[0]
    d = np.zeros(n_i, dtype=np.int64)
    for a in range(n_i):
        for b in np.flatnonzero(p_ij.p[a]):
            for c in np.flatnonzero(p_jk.p[b]):
                if p_ki.p[c, a] == 1:
                    d[a] = 1
    return CycleMask(p_ij.i, d)


def pairwise_pseudo_mask(p_ij: PartialMatching) -> CycleMask:
    """Mask of detections in view i that have a partner in view j."""
    return CycleMask(p_ij.i, (p_ij.p.sum(axis=1) >= 1).astype(np.int64))


class MaskBuilder:
    """Pseudo-matches per view pair, cached; masks for pairs and triples."""

    def __init__(self, sims: dict, cfg: TemperatureConfig = TemperatureConfig(),
                 tau: float | None = None):
        self._sims = sims
        self.cfg = cfg
        self.tau = tau
        self._p = {}

    def matching(self, x, y) -> PartialMatching:
        if (x, y) not in self._p:
            if (x, y) in self._sims:
                self._p[(x, y)] = pseudo_matches(self._sims[(x, y)], x, y, self.cfg, self.tau)
            else:
                self._p[(x, y)] = self.matching(y, x).T
        return self._p[(x, y)]

    def pair(self, i, j) -> CycleMask:
        return pairwise_pseudo_mask(self.matching(i, j))

    def triple(self, i, j, k) -> CycleMask:
        return pseudo_mask(self.matching(i, j), self.matching(j, k), self.matching(k, i))
