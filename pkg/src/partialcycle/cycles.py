"""Similarity matrices between views and the trainable cycle matrices built from them."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffMatrix, ShapeError

VARIANTS = ("v0", "v1", "v2", "v3")


@dataclass(frozen=True)
class TemperatureConfig:
    tau0: float = 3.0

    def __post_init__(self):
        if not self.tau0 > 0:
            raise ValueError(f"tau0 must be positive, got {self.tau0}")


@dataclass
class ViewEmbeddings:
    view_id: int
    vectors: DiffMatrix

    def __post_init__(self):
        if not isinstance(self.vectors, DiffMatrix):
            self.vectors = ad.constant(self.vectors)
        if self.vectors.rows < 1:
            raise ShapeError("a view needs at least one embedding")
        norms = np.linalg.norm(self.vectors.value, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ShapeError("embedding rows must have unit norm")

    @property
    def n(self) -> int:
        return self.vectors.rows


@dataclass
class SimilarityMatrix:
    i: int
    j: int
    s: DiffMatrix

    @property
    def T(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.j, self.i, ad.transpose(self.s))


@dataclass
class CycleMatrix:
    anchor_view: int
    variant: str
    a: DiffMatrix
    triple: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.a.rows


def adaptive_tau(n_cols: int, cfg: TemperatureConfig = TemperatureConfig()) -> float:
    """Softmax temperature for a matrix with ``n_cols`` candidates per row."""
    if n_cols < 1:
        raise ValueError("n_cols must be >= 1")
    return cfg.tau0 * math.log(n_cols + 1)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cosine_similarities(a: ViewEmbeddings, b: ViewEmbeddings) -> SimilarityMatrix:
    if a.vectors.cols != b.vectors.cols:
        raise ShapeError(f"embedding dims differ: {a.vectors.cols} vs {b.vectors.cols}")
    return SimilarityMatrix(a.view_id, b.view_id, ad.matmul(a.vectors, ad.transpose(b.vectors)))


def soft_assign(s: DiffMatrix, cfg: TemperatureConfig = TemperatureConfig(),
                tau: float | None = None) -> DiffMatrix:
    """Row softmax of ``s`` at the temperature its width calls for."""
    return ad.row_softmax(s, adaptive_tau(s.cols, cfg) if tau is None else tau)


def soft_match(s: SimilarityMatrix, cfg: TemperatureConfig = TemperatureConfig(),
               tau: float | None = None) -> tuple[DiffMatrix, DiffMatrix]:
    """Row-wise and column-wise soft matchings (A_ij, A_ji) of one similarity matrix."""
    return soft_assign(s.s, cfg, tau), soft_assign(ad.transpose(s.s), cfg, tau)


def pairwise_cycle(a_ij: DiffMatrix, a_ji: DiffMatrix, anchor: int = 0, other: int = 1) -> CycleMatrix:
    if a_ij.cols != a_ji.rows or a_ij.rows != a_ji.cols:
        raise ShapeError(f"pairwise cycle: {a_ij.shape} and {a_ji.shape}")
    return CycleMatrix(anchor, "pairwise", ad.matmul(a_ij, a_ji), (anchor, other))


class CycleBuilder:
    """Assembles cycle matrices over a set of views, sharing soft matchings.

    ``sims`` maps ordered view pairs (x, y) to S_xy; a missing direction is
    taken as the transpose of the one present.
    """

    def __init__(self, sims: dict, cfg: TemperatureConfig = TemperatureConfig(),
                 tau: float | None = None):
        self.cfg = cfg
        self.tau = tau
        self._sims = dict(sims)
        self._soft = {}
        self._prod = {}

    def sim(self, x, y) -> DiffMatrix:
        key = (x, y)
        if key not in self._sims:
            if (y, x) not in self._sims:
                raise KeyError(f"no similarity for views {x}, {y}")
            self._sims[key] = ad.transpose(self._sims[(y, x)])
        return self._sims[key]

    def soft(self, x, y) -> DiffMatrix:
        key = (x, y)
        if key not in self._soft:
            self._soft[key] = soft_assign(self.sim(x, y), self.cfg, self.tau)
        return self._soft[key]

    def chained(self, x, y, z) -> DiffMatrix:
        """S_xyz = S_xy S_yz."""
        key = (x, y, z)
        if key not in self._prod:
            self._prod[key] = ad.matmul(self.sim(x, y), self.sim(y, z))
        return self._prod[key]

    def soft_chained(self, x, y, z, transposed: bool = False) -> DiffMatrix:
        key = ("T" if transposed else "", x, y, z)
        if key not in self._soft:
            s = self.chained(x, y, z)
            self._soft[key] = soft_assign(ad.transpose(s) if transposed else s, self.cfg, self.tau)
        return self._soft[key]

    def pairwise(self, i, j) -> CycleMatrix:
        return pairwise_cycle(self.soft(i, j), self.soft(j, i), i, j)

    def triple(self, i, j, k, variants=VARIANTS) -> list[CycleMatrix]:
        out = []
        for v in variants:
            if v == "v0":
                a = self.soft(i, j) @ self.soft(j, k) @ self.soft(k, i)
            elif v == "v1":
                a = self.soft_chained(i, j, k) @ self.soft_chained(i, j, k, transposed=True)
            elif v == "v2":
                a = self.soft_chained(i, j, k) @ self.soft(k, i)
            elif v == "v3":
                a = self.soft_chained(i, j, k) @ self.soft_chained(k, i, j) @ self.soft_chained(j, k, i)
            else:
                raise ValueError(f"unknown cycle variant {v!r}")
            out.append(CycleMatrix(i, v, a, (i, j, k)))
        return out

    def all_cycles(self, views, variants=VARIANTS, pairwise: bool = True) -> list[CycleMatrix]:
        """Pairwise cycles for every unordered pair, then the chosen variants per triple."""
        views = sorted(views)
        cycles = []
        if pairwise:
            cycles += [self.pairwise(i, j) for i, j in itertools.combinations(views, 2)]
        if variants:
            for i, j, k in itertools.combinations(views, 3):
                cycles += self.triple(i, j, k, variants)
        return cycles


def triple_cycles(s_ij: SimilarityMatrix, s_jk: SimilarityMatrix, s_ki: SimilarityMatrix,
                  cfg: TemperatureConfig = TemperatureConfig(), tau: float | None = None,
                  variants=VARIANTS) -> list[CycleMatrix]:
    """The four triplewise cycles anchored at view i."""
    if not (s_ij.s.cols == s_jk.s.rows and s_jk.s.cols == s_ki.s.rows and s_ki.s.cols == s_ij.s.rows):
        raise ShapeError(f"triple shapes do not chain: {s_ij.s.shape}, {s_jk.s.shape}, {s_ki.s.shape}")
    i, j, k = s_ij.i, s_jk.i, s_ki.i
    if len({i, j, k}) < 3:
        i, j, k = 0, 1, 2
    builder = CycleBuilder({(i, j): s_ij.s, (j, k): s_jk.s, (k, i): s_ki.s}, cfg, tau)
    return builder.triple(i, j, k, variants)


def view_similarities(embeddings: list[ViewEmbeddings]) -> dict:
    """S_xy for every x < y (by position in ``embeddings``)."""
    return {
        (x, y): cosine_similarities(embeddings[x], embeddings[y]).s
        for x, y in itertools.combinations(range(len(embeddings)), 2)
    }
