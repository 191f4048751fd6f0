"""Dense float64 matrices recorded on a tape for reverse-mode gradients.

Every value is a 2-D numpy array. A :class:`Tape` stores nodes in creation
order, so parents always precede children and a single reversed sweep
suffices for :func:`backward`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Rejected input: incompatible shapes or malformed values."""


class Node:
    __slots__ = ("op", "parents", "value", "vjp")

    def __init__(self, op, parents, value, vjp):
        self.op = op
        self.parents = parents
        self.value = value
        self.vjp = vjp


class Tape:
    """Append-only record of operations.

    A tape is single-owner. Independent tapes may be used from different
    threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}

    def _record(self, op, parents, value, vjp) -> int:
        self.nodes.append(Node(op, parents, value, vjp))
        return len(self.nodes) - 1

    def leaf(self, values, name: str | None = None) -> "DiffMatrix":
        """Register a trainable input and return its handle."""
        arr = _as_matrix(values)
        handle = self._record("leaf", (), arr, None)
        if name is not None:
            self.leaves[name] = handle
        return DiffMatrix(arr, self, handle)

    def constant(self, values) -> "DiffMatrix":
        return DiffMatrix(_as_matrix(values), self, None)

    def __len__(self):
        return len(self.nodes)


def _as_matrix(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("matrix entries must be finite")
    return arr


class DiffMatrix:
    """A matrix value, optionally tied to a node on a tape."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value: np.ndarray, tape: Tape | None = None, node: int | None = None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.value.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def detach(self) -> "DiffMatrix":
        return DiffMatrix(self.value, self.tape, None)

    def __repr__(self):
        return f"DiffMatrix(shape={self.shape}, tracked={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, DiffMatrix):
            return hadamard(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self)


def constant(values) -> DiffMatrix:
    """A matrix outside any tape (no gradient)."""
    return DiffMatrix(_as_matrix(values))


def _lift(x) -> DiffMatrix:
    return x if isinstance(x, DiffMatrix) else constant(x)


def record(op: str, inputs: Sequence[DiffMatrix], value: np.ndarray,
          vjp: Callable[[np.ndarray], tuple]) -> DiffMatrix:
    tape = None
    for x in inputs:
        if x.node is not None:
            if tape is not None and x.tape is not tape:
                raise ShapeError("operands recorded on different tapes")
            tape = x.tape
    if tape is None:
        return DiffMatrix(value)
    parents = tuple(x.node for x in inputs)
    return DiffMatrix(value, tape, tape._record(op, parents, value, vjp))


def matmul(a, b) -> DiffMatrix:
    a, b = _lift(a), _lift(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> DiffMatrix:
    a = _lift(a)
    return record("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def add(a, b) -> DiffMatrix:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return record("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a, b) -> DiffMatrix:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return record("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def add_scalar(a, c: float) -> DiffMatrix:
    a = _lift(a)
    return record("add_scalar", (a,), a.value + c, lambda g: (g,))


def scalar_mul(a, c: float) -> DiffMatrix:
    a = _lift(a)
    return record("scalar_mul", (a,), a.value * c, lambda g: (g * c,))


def hadamard(a, b) -> DiffMatrix:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return record("hadamard", (a, b), av * bv, lambda g: (g * bv, g * av))


def relu(a) -> DiffMatrix:
    a = _lift(a)
    active = a.value > 0
    return record("relu", (a,), np.where(active, a.value, 0.0), lambda g: (g * active,))


def tanh(a) -> DiffMatrix:
    a = _lift(a)
    out = np.tanh(a.value)
    return record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sum_all(a) -> DiffMatrix:
    a = _lift(a)
    shape = a.shape
    return record("sum_all", (a,), np.array([[a.value.sum()]]),
                 lambda g: (np.full(shape, g[0, 0]),))


def add_row(a, b) -> DiffMatrix:
    """Add the 1 x cols row ``b`` to every row of ``a`` (bias add)."""
    a, b = _lift(a), _lift(b)
    if b.rows != 1 or b.cols != a.cols:
        raise ShapeError(f"add_row: {a.shape} + {b.shape}")
    return record("add_row", (a, b), a.value + b.value,
                 lambda g: (g, g.sum(axis=0, keepdims=True)))


def take_rows(a, start: int, stop: int) -> DiffMatrix:
    a = _lift(a)
    if not 0 <= start <= stop <= a.rows:
        raise ShapeError(f"take_rows: [{start}:{stop}] of {a.rows} rows")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return record("take_rows", (a,), a.value[start:stop].copy(), vjp)


def row_normalize(a, eps: float = 1e-12) -> DiffMatrix:
    """Scale every row to unit Euclidean norm."""
    a = _lift(a)
    norms = np.sqrt((a.value ** 2).sum(axis=1, keepdims=True) + eps)
    out = a.value / norms

    def vjp(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return record("row_normalize", (a,), out, vjp)


def row_softmax(s, tau: float) -> DiffMatrix:
    """exp(tau * row) normalised per row, with max subtraction."""
    if not tau > 0:
        raise ShapeError(f"softmax temperature must be positive, got {tau}")
    s = _lift(s)
    if not np.all(np.isfinite(s.value)):
        raise ShapeError("softmax input has non-finite entries")
    z = tau * s.value
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (tau * out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record("row_softmax", (s,), out, vjp)


def diagonal(a) -> DiffMatrix:
    """The diagonal of a square matrix as an n x 1 column."""
    a = _lift(a)
    if a.rows != a.cols:
        raise ShapeError(f"diagonal of non-square {a.shape}")
    n = a.rows

    def vjp(g):
        return (np.diag(g[:, 0]),)

    return record("diagonal", (a,), np.diag(a.value).reshape(n, 1).copy(), vjp)


def row_max_excluding_diagonal(a) -> DiffMatrix:
    """Column vector whose entry r is max over b != r of a[r, b].

    The subgradient goes to a single arg-max per row, lowest index on ties.
    """
    a = _lift(a)
    if a.rows != a.cols or a.rows < 2:
        raise ShapeError(f"row max off the diagonal needs square n>=2, got {a.shape}")
    n = a.rows
    masked = a.value.copy()
    np.fill_diagonal(masked, -np.inf)
    arg = masked.argmax(axis=1)
    rows = np.arange(n)
    out = masked[rows, arg].reshape(n, 1)

    def vjp(g):
        full = np.zeros((n, n))
        full[rows, arg] = g[:, 0]
        return (full,)

    return record("row_max_offdiag", (a,), out, vjp)


def margin_terms(a, m: float) -> DiffMatrix:
    """Per-row hinge relu(max_{b != r} a[r, b] - a[r, r] + m) as n x 1.

    Fused equivalent of relu(row_max_excluding_diagonal(a) - diagonal(a) + m);
    used on the hot path of the cycle losses.
    """
    a = _lift(a)
    if a.rows != a.cols or a.rows < 2:
        raise ShapeError(f"margin loss needs square n>=2, got {a.shape}")
    n = a.rows
    masked = a.value.copy()
    np.fill_diagonal(masked, -np.inf)
    arg = masked.argmax(axis=1)
    rows = np.arange(n)
    pre = masked[rows, arg] - a.value[rows, rows] + m
    active = pre > 0
    out = np.where(active, pre, 0.0).reshape(n, 1)

    def vjp(g):
        gg = g[:, 0] * active
        full = np.zeros((n, n))
        full[rows, arg] += gg
        full[rows, rows] -= gg
        return (full,)

    return record("margin_terms", (a,), out, vjp)


def mean_of(terms: Sequence[DiffMatrix]) -> DiffMatrix:
    """Arithmetic mean of 1x1 matrices, as one node."""
    terms = [_lift(t) for t in terms]
    if not terms:
        raise ShapeError("mean of an empty list")
    if any(t.shape != (1, 1) for t in terms):
        raise ShapeError("mean_of expects 1x1 terms")
    n = len(terms)
    value = np.array([[sum(t.value[0, 0] for t in terms) / n]])
    return record("mean_of", terms, value, lambda g: tuple(g / n for _ in range(n)))


def backward(loss: DiffMatrix) -> dict[int, np.ndarray]:
    """Gradients of a 1x1 ``loss`` with respect to every leaf on its tape.

    Returns a dict keyed by leaf node handle. Leaves the loss does not
    depend on get a zero gradient.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    if loss.node is None:
        return {}
    tape = loss.tape
    nodes = tape.nodes
    grads: dict[int, np.ndarray] = {loss.node: np.ones((1, 1))}
    for idx in range(loss.node, -1, -1):
        g = grads.get(idx)
        node = nodes[idx]
        if node.op == "leaf":
            continue
        if g is None:
            continue
        del grads[idx]
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    out = {}
    for idx, node in enumerate(nodes):
        if node.op == "leaf":
            out[idx] = grads.get(idx, np.zeros_like(node.value))
    return out


def grad_of(grads: dict[int, np.ndarray], x: DiffMatrix) -> np.ndarray:
    return grads[x.node]

