"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .cycles import VARIANTS, CycleBuilder, TemperatureConfig, ViewEmbeddings, view_similarities
from .loss import MarginConfig, batch_loss
from .masking import MaskBuilder


@dataclass
class GradReport:
    max_rel_error: float
    max_abs_error: float
    entries: int
    worst: tuple  # (param name, flat index)

    def ok(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_error < rtol


def _entry_error(a: float, n: float, atol: float) -> tuple[float, float]:
    """(relative, absolute) error; tiny entries count as relative error 0 within atol."""
    diff = abs(a - n)
    scale = max(abs(a), abs(n))
    if scale < atol:
        return (0.0 if diff <= atol else float("inf")), diff
    return diff / scale, diff


def check_gradients(fn: Callable[[dict], ad.DiffMatrix], params: dict, h: float = 1e-5,
                    atol: float = 1e-8) -> GradReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` receives a dict of DiffMatrix leaves (same keys as ``params``)
    and returns a 1x1 loss.
    """
    tape = ad.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    grads = ad.backward(fn(leaves))

    def value_at(name, values):
        t = ad.Tape()
        return fn({k: t.leaf(values if k == name else params[k], k) for k in params}).item()

    worst_rel, worst_abs, worst, count = 0.0, 0.0, (None, -1), 0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        analytic = grads[leaves[name].node]
        for idx in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[idx] = base.flat[idx] + h
            up = value_at(name, bumped.reshape(base.shape))
            bumped[idx] = base.flat[idx] - h
            down = value_at(name, bumped.reshape(base.shape))
            rel, diff = _entry_error(analytic.flat[idx], (up - down) / (2 * h), atol)
            count += 1
            worst_abs = max(worst_abs, diff)
            if rel > worst_rel:
                worst_rel, worst = rel, (name, idx)
    return GradReport(worst_rel, worst_abs, count, worst)


def masked_batch_problem(rng, n_views: int = 3, dim: int = 8, sizes=(2, 6),
                         mask_mode: str = "literal"):
    """A random multi-view batch and its full masked loss.

    Masks are computed once at the starting point and held fixed, as they
    are during training, so the loss is a smooth function of the raw vectors
    away from hinge kinks.
    """
    raw = {f"x{v}": rng.standard_normal((int(rng.integers(sizes[0], sizes[1] + 1)), dim))
           for v in range(n_views)}
    temp = TemperatureConfig()
    margins = MarginConfig(mask_mode=mask_mode)

    def cycles(leaves):
        embs = [ViewEmbeddings(v, ad.row_normalize(leaves[f"x{v}"])) for v in range(n_views)]
        sims = view_similarities(embs)
        return sims, CycleBuilder(sims, temp).all_cycles(range(n_views), VARIANTS, True)

    t = ad.Tape()
    sims, base = cycles({k: t.leaf(v) for k, v in raw.items()})
    masker = MaskBuilder({k: s.value for k, s in sims.items()}, temp)
    masks = [masker.pair(*c.triple) if c.variant == "pairwise" else masker.triple(*c.triple)
             for c in base]

    def fn(leaves):
        _, cs = cycles(leaves)
        return batch_loss(list(zip(cs, masks)), margins, True)

    return fn, raw
