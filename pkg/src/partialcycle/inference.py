"""Cross-camera matching at test time and precision/recall/F1 scoring."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .masking import PartialMatching
from .scenes import SceneDataset


def default_grid() -> tuple:
    return tuple(round(0.05 * i, 2) for i in range(20))


@dataclass(frozen=True)
class InferenceConfig:
    theta: float = 0.5
    grid: tuple = field(default_factory=default_grid)
    micro: bool = False

    def __post_init__(self):
        if not -1 <= self.theta <= 1:
            raise ValueError("theta must lie in [-1, 1]")
        if len(self.grid) == 0:
            raise ValueError("theta grid is empty")
        if list(self.grid) != sorted(self.grid):
            raise ValueError("theta grid must be sorted")


def hungarian(profit) -> list[tuple[int, int]]:
    """Maximum-total-profit assignment of a rectangular matrix, as (row, col) pairs."""
    profit = np.asarray(profit, dtype=np.float64)
    if profit.size == 0:
        return []
    if not np.all(np.isfinite(profit)):
        raise ValueError("profit matrix must be finite")
    rows, cols = linear_sum_assignment(profit, maximize=True)
    return sorted(zip(rows.tolist(), cols.tolist()))


def _assigned(emb_a: np.ndarray, emb_b: np.ndarray):
    """Hungarian pairs with their similarities, before any threshold."""
    if len(emb_a) == 0 or len(emb_b) == 0:
        return []
    sim = emb_a @ emb_b.T
    return [(r, c, float(sim[r, c])) for r, c in hungarian(sim)]


def match_pair(emb_a, emb_b, cfg: InferenceConfig = InferenceConfig(), i: int = 0, j: int = 1) -> PartialMatching:
    """Assign by cosine similarity, then drop assigned pairs below theta."""
    emb_a, emb_b = np.asarray(emb_a, float), np.asarray(emb_b, float)
    p = np.zeros((len(emb_a), len(emb_b)), dtype=np.int64)
    for r, c, s in _assigned(emb_a, emb_b):
        if s >= cfg.theta:
            p[r, c] = 1
    return PartialMatching(i, j, p)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1 with 0 for every undefined ratio."""
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


@dataclass
class InstanceResult:
    scene: int
    timestep: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass
class MatchReport:
    instances: list
    theta: float
    micro: bool = False

    def _summary(self, rows):
        if not rows:
            return {"instances": 0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
        if self.micro:
            tp = sum(r.tp for r in rows)
            fp = sum(r.fp for r in rows)
            fn = sum(r.fn for r in rows)
            p, r, f = prf(tp, fp, fn)
        else:
            p = float(np.mean([r.precision for r in rows]))
            r = float(np.mean([x.recall for x in rows]))
            f = float(np.mean([x.f1 for x in rows]))
        return {"instances": len(rows), "precision": p, "recall": r, "f1": f}

    @property
    def overall(self) -> dict:
        return self._summary(self.instances)

    def per_scene(self) -> dict:
        scenes = sorted({r.scene for r in self.instances})
        return {s: self._summary([r for r in self.instances if r.scene == s]) for s in scenes}

    @property
    def f1(self) -> float:
        return self.overall["f1"]

    @property
    def precision(self) -> float:
        return self.overall["precision"]

    @property
    def recall(self) -> float:
        return self.overall["recall"]

    def write_csv(self, instances_path, summary_path) -> None:
        with Path(instances_path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scene", "timestep", "tp", "fp", "fn", "precision", "recall", "f1"])
            for r in self.instances:
                w.writerow([r.scene, r.timestep, r.tp, r.fp, r.fn,
                            f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}"])
        with Path(summary_path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scene", "instances", "precision", "recall", "f1", "theta"])
            rows = list(self.per_scene().items()) + [("overall", self.overall)]
            for name, s in rows:
                w.writerow([name, s["instances"], f"{s['precision']:.6f}", f"{s['recall']:.6f}",
                            f"{s['f1']:.6f}", f"{self.theta:.2f}"])


class _PreparedInstance:
    """Per-instance Hungarian results, reusable across thresholds."""

    __slots__ = ("scene", "timestep", "pairs", "n_true")

    def __init__(self, frame, embed):
        self.scene, self.timestep = frame.scene_id, frame.timestep
        embs = [embed(v.features) if len(v) else np.zeros((0, 1)) for v in frame.views]
        self.pairs = []
        self.n_true = 0
        for a, b in itertools.combinations(range(len(frame.views)), 2):
            ids_a, ids_b = frame.views[a].identities, frame.views[b].identities
            self.n_true += len(set(ids_a.tolist()) & set(ids_b.tolist()))
            for r, c, s in _assigned(embs[a], embs[b]):
                self.pairs.append((s, bool(ids_a[r] == ids_b[c])))

    def score(self, theta: float) -> InstanceResult:
        tp = sum(1 for s, same in self.pairs if s >= theta and same)
        fp = sum(1 for s, same in self.pairs if s >= theta and not same)
        fn = self.n_true - tp
        return InstanceResult(self.scene, self.timestep, tp, fp, fn, *prf(tp, fp, fn))


def _prepare(ds: SceneDataset, embed) -> list:
    if not ds.labeled:
        raise ValueError("evaluation needs identity labels")
    return [_PreparedInstance(f, embed) for f in ds.frames]


def _as_embed(encoder):
    if callable(encoder) and not hasattr(encoder, "embed"):
        return encoder
    return encoder.embed


def evaluate(encoder, ds: SceneDataset, cfg: InferenceConfig = InferenceConfig()) -> MatchReport:
    """Match every camera pair of every frame and score against the labels.

    ``encoder`` is anything with an ``embed(features)`` method, or a plain
    callable mapping raw features to unit-norm embeddings.
    """
    prepared = _prepare(ds, _as_embed(encoder))
    return MatchReport([p.score(cfg.theta) for p in prepared], cfg.theta, cfg.micro)


def tune_theta(encoder, ds: SceneDataset, cfg: InferenceConfig = InferenceConfig()) -> float:
    """Grid value of theta with the best mean F1 on ``ds``; ties go to the smaller theta."""
    if len(cfg.grid) == 0:
        raise ValueError("theta grid is empty")
    prepared = _prepare(ds, _as_embed(encoder))
    best, best_f1 = None, -1.0
    for theta in cfg.grid:
        f1 = MatchReport([p.score(theta) for p in prepared], theta, cfg.micro).f1
        if f1 > best_f1:
            best, best_f1 = theta, f1
    return float(best)


def sweep(encoder, ds: SceneDataset, grid) -> list[MatchReport]:
    prepared = _prepare(ds, _as_embed(encoder))
    return [MatchReport([p.score(t) for p in prepared], t) for t in grid]
