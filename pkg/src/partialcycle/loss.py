"""Margin losses on cycle matrices, plain and pseudo-masked."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffMatrix, ShapeError
from .cycles import CycleMatrix
from .masking import CycleMask

MASK_MODES = ("literal", "row_select")


@dataclass(frozen=True)
class MarginConfig:
    m_plus: float = 0.7
    m_empty: float = 0.3
    m_unmasked: float = 0.5
    mask_mode: str = "literal"

    def __post_init__(self):
        if not (0 < self.m_empty < self.m_plus < 1):
            raise ValueError(f"need 0 < m_empty < m_plus < 1, got {self.m_empty}, {self.m_plus}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")


def _matrix(a) -> DiffMatrix:
    return a.a if isinstance(a, CycleMatrix) else a


def margin_loss(a, m: float) -> DiffMatrix:
    """Sum over rows of relu(max off-diagonal - diagonal + m)."""
    return ad.sum_all(ad.margin_terms(_matrix(a), m))


def _hinges(v: np.ndarray, m: float):
    """Row hinge values, arg-max columns and activity, numpy only."""
    n = v.shape[0]
    masked = v.copy()
    np.fill_diagonal(masked, -np.inf)
    arg = masked.argmax(axis=1)
    rows = np.arange(n)
    pre = masked[rows, arg] - v[rows, rows] + m
    return np.maximum(pre, 0.0), arg, pre > 0


def _hinge_grad(n, arg, w):
    """Gradient of sum_r w_r * hinge_r with respect to the matrix."""
    rows = np.arange(n)
    full = np.zeros((n, n))
    np.add.at(full, (rows, arg), w)
    full[rows, rows] -= w
    return full


def _weighted_symmetric(a: DiffMatrix, m: float, w: np.ndarray, op: str) -> DiffMatrix:
    """0.5 * sum_r w_r (row hinge_r + column hinge_r) as one tape node."""
    v = a.value
    if v.shape[0] != v.shape[1] or v.shape[0] < 2:
        raise ShapeError(f"margin loss needs square n>=2, got {v.shape}")
    n = v.shape[0]
    h_r, arg_r, act_r = _hinges(v, m)
    h_c, arg_c, act_c = _hinges(v.T, m)
    value = np.array([[0.5 * float(w @ h_r + w @ h_c)]])

    def vjp(g):
        s = 0.5 * g[0, 0]
        return (s * (_hinge_grad(n, arg_r, w * act_r) + _hinge_grad(n, arg_c, w * act_c).T),)

    return ad.record(op, (a,), value, vjp)


def symmetric_margin_loss(a, m: float, fused: bool = True) -> DiffMatrix:
    """Average of the margin loss of ``a`` and of its transpose."""
    a = ad._lift(_matrix(a))
    if fused:
        return _weighted_symmetric(a, m, np.ones(a.rows), "symmetric_margin")
    return ad.scalar_mul(ad.add(margin_loss(a, m), margin_loss(ad.transpose(a), m)), 0.5)


def _mask_vector(mask, n: int) -> np.ndarray:
    d = mask.d if isinstance(mask, CycleMask) else np.asarray(mask).reshape(-1)
    if d.shape[0] != n:
        raise ShapeError(f"mask length {d.shape[0]} does not match cycle side {n}")
    return d.astype(np.float64)


def _literal_fused(a: DiffMatrix, d: np.ndarray, cfg: MarginConfig) -> DiffMatrix:
    # diag(d) * A is diagonal, so every off-diagonal max is 0 and each row and
    # its matching column give the same hinge relu(m - d_r A_rr).
    if a.rows != a.cols or a.rows < 2:
        raise ShapeError(f"margin loss needs square n>=2, got {a.shape}")
    diag = np.diag(a.value)
    pre_pos = cfg.m_plus - d * diag
    pre_neg = cfg.m_empty - (1.0 - d) * diag
    value = np.array([[0.5 * float(np.maximum(pre_pos, 0).sum() + np.maximum(pre_neg, 0).sum())]])

    def vjp(g):
        coef = -0.5 * g[0, 0] * (d * (pre_pos > 0) + (1.0 - d) * (pre_neg > 0))
        return (np.diag(coef),)

    return ad.record("masked_literal", (a,), value, vjp)


def masked_loss(a, mask, cfg: MarginConfig = MarginConfig(), fused: bool = True) -> DiffMatrix:
    """Two-margin loss: m_plus on cycles predicted present, m_empty on the rest.

    ``literal`` multiplies the cycle elementwise by diag(mask) and
    diag(1 - mask) before the symmetric margin loss, so every zeroed row
    contributes a constant. ``row_select`` keeps the full cycle and instead
    picks which row/column hinge terms each margin applies to.
    """
    a = ad._lift(_matrix(a))
    d = _mask_vector(mask, a.rows)
    if fused:
        if cfg.mask_mode == "literal":
            return _literal_fused(a, d, cfg)
        pos = _weighted_symmetric(a, cfg.m_plus, d, "masked_select")
        neg = _weighted_symmetric(a, cfg.m_empty, 1.0 - d, "masked_select")
        return ad.scalar_mul(ad.add(pos, neg), 0.5)
    if cfg.mask_mode == "literal":
        keep = ad.constant(np.diag(d))
        drop = ad.constant(np.diag(1.0 - d))
        pos = symmetric_margin_loss(ad.hadamard(a, keep), cfg.m_plus, fused=False)
        neg = symmetric_margin_loss(ad.hadamard(a, drop), cfg.m_empty, fused=False)
    else:
        at = ad.transpose(a)
        sel = ad.constant(d.reshape(-1, 1))
        rest = ad.constant((1.0 - d).reshape(-1, 1))

        def selected(m, w):
            rows = ad.sum_all(ad.hadamard(ad.margin_terms(a, m), w))
            cols = ad.sum_all(ad.hadamard(ad.margin_terms(at, m), w))
            return ad.scalar_mul(ad.add(rows, cols), 0.5)

        pos = selected(cfg.m_plus, sel)
        neg = selected(cfg.m_empty, rest)
    return ad.scalar_mul(ad.add(pos, neg), 0.5)


def batch_loss(cycles, cfg: MarginConfig = MarginConfig(), masking_enabled: bool = True,
               fused: bool = True) -> DiffMatrix:
    """Mean per-cycle loss over (cycle, mask) pairs.

    With masking off the masks are ignored and the symmetric margin loss
    with ``m_unmasked`` is used.
    """
    cycles = list(cycles)
    if not cycles:
        raise ShapeError("batch_loss needs at least one cycle")
    if masking_enabled:
        terms = [masked_loss(c, mask, cfg, fused) for c, mask in cycles]
    else:
        terms = [symmetric_margin_loss(c, cfg.m_unmasked, fused) for c, _ in cycles]
    return ad.mean_of(terms)
