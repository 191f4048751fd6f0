"""Seeded train/tune/test cells and the grids built from them."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .inference import InferenceConfig, evaluate, tune_theta
from .scenes import SceneConfig, generate_scene, overlap_stats, reduce_fov
from .training import TrainConfig, train


@dataclass
class CellResult:
    name: str
    seed: int
    keep_fraction: float
    f1: float
    precision: float
    recall: float
    theta: float
    two_camera_jaccard: float
    three_camera_jaccard: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CellResult":
        return cls(**json.loads(text))


def splits(scene: SceneConfig, seed: int):
    """Train, validation and test datasets for one seed."""
    base = scene.replace(seed=seed)
    return (generate_scene(base.replace(split="train")),
            generate_scene(base.replace(split="val")),
            generate_scene(base.replace(split="test")))


def run_cell(name: str, scene: SceneConfig, cfg: TrainConfig, seed: int,
             keep_fraction: float = 1.0, grid=None) -> CellResult:
    """Train on a (possibly FOV-reduced) train split, tune theta on val, score test."""
    start = time.perf_counter()
    tr, va, te = splits(scene, seed)
    if keep_fraction < 1.0:
        tr = reduce_fov(tr, keep_fraction)
    stats = overlap_stats(tr)
    result = train(tr, dataclasses.replace(cfg, seed=seed))
    inf = InferenceConfig() if grid is None else InferenceConfig(grid=tuple(grid))
    theta = tune_theta(result.encoder, va, inf)
    report = evaluate(result.encoder, te, dataclasses.replace(inf, theta=theta))
    return CellResult(name, seed, keep_fraction, report.f1, report.precision, report.recall,
                      theta, stats.two_camera_jaccard, stats.three_camera_jaccard,
                      time.perf_counter() - start)


def cached_cell(cache_dir, name: str, scene: SceneConfig, cfg: TrainConfig, seed: int,
                keep_fraction: float = 1.0, grid=None) -> CellResult:
    """:func:`run_cell`, skipped when a result file for the cell already exists."""
    path = Path(cache_dir) / f"{name}__keep{keep_fraction:.2f}__seed{seed}.json"
    if path.exists():
        return CellResult.from_json(path.read_text())
    res = run_cell(name, scene, cfg, seed, keep_fraction, grid)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(res.to_json() + "\n")
    tmp.replace(path)
    return res


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def format_table(results: list[CellResult], rows: list[str], keeps: list[float]) -> str:
    """F1 as mean +- std in percent; one row per method, one column per keep fraction."""
    head = ["method"] + [("full" if k == 1.0 else f"{round(100 * k)}%") for k in keeps]
    lines = [head]
    for name in rows:
        line = [name]
        for k in keeps:
            f = [r.f1 for r in results if r.name == name and r.keep_fraction == k]
            if f:
                m, s = mean_std(f)
                line.append(f"{100 * m:.1f} ± {100 * s:.1f}")
            else:
                line.append("-")
        lines.append(line)
    jac = ["two-camera Jaccard"]
    for k in keeps:
        j = [r.two_camera_jaccard for r in results if r.keep_fraction == k]
        jac.append(f"{np.mean(j):.2f}" if j else "-")
    lines.append(jac)
    widths = [max(len(row[c]) for row in lines) for c in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines)
