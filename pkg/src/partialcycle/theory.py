"""Exact checks of partial cycle-consistency on 0/1 matchings.

Everything here is integer arithmetic. Masks are built by explicit path
enumeration so they stay independent of the matrix products they are
compared against.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class InconsistentMatchingError(ValueError):
    pass


@dataclass
class MultiViewMatching:
    """Pairwise partial matchings between ``len(sizes)`` views.

    ``matchings[(i, j)]`` is the n_i x n_j 0/1 matrix P_ij for every ordered
    pair, including i == j.
    """

    sizes: list
    matchings: dict
    identities: list = field(default=None)

    @property
    def n_views(self) -> int:
        return len(self.sizes)

    def p(self, i, j) -> np.ndarray:
        return self.matchings[(i, j)]

    @classmethod
    def from_identities(cls, identities) -> "MultiViewMatching":
        """P_ij[a, b] = 1 iff detection a of view i and b of view j share an identity."""
        identities = [list(v) for v in identities]
        for ids in identities:
            if len(set(ids)) != len(ids):
                raise ValueError("an identity appears twice in one view")
        sizes = [len(v) for v in identities]
        matchings = {}
        for i, j in itertools.product(range(len(identities)), repeat=2):
            p = np.zeros((sizes[i], sizes[j]), dtype=np.int64)
            pos = {ident: b for b, ident in enumerate(identities[j])}
            for a, ident in enumerate(identities[i]):
                b = pos.get(ident)
                if b is not None:
                    p[a, b] = 1
            matchings[(i, j)] = p
        return cls(sizes, matchings, identities)


def _index_check(m: MultiViewMatching, *views):
    for v in views:
        if not 0 <= v < m.n_views:
            raise IndexError(f"view {v} out of range for {m.n_views} views")


def _links(p: np.ndarray) -> list[list[int]]:
    return [[b for b, v in enumerate(row) if v == 1] for row in p.tolist()]


def mask_iji(m: MultiViewMatching, i: int, j: int) -> np.ndarray:
    _index_check(m, i, j)
    out = np.zeros((m.sizes[i], m.sizes[i]), dtype=np.int64)
    for a, partners in enumerate(_links(m.p(i, j))):
        if partners:
            out[a, a] = 1
    return out


def mask_ijki(m: MultiViewMatching, i: int, j: int, k: int) -> np.ndarray:
    _index_check(m, i, j, k)
    ij, jk, ki = _links(m.p(i, j)), _links(m.p(j, k)), _links(m.p(k, i))
    out = np.zeros((m.sizes[i], m.sizes[i]), dtype=np.int64)
    for a in range(m.sizes[i]):
        for b in ij[a]:
            for c in jk[b]:
                if a in ki[c]:
                    out[a, a] = 1
    return out


def ground_truth_masks(m: MultiViewMatching, i: int, j: int, k: int):
    """(I_iji, I_ijki) as 0/1 diagonal vectors."""
    return np.diag(mask_iji(m, i, j)).copy(), np.diag(mask_ijki(m, i, j, k)).copy()


@dataclass
class Verdict:
    ok: bool
    violations: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def check_consistency(m: MultiViewMatching) -> Verdict:
    """Every two-step match i -> j -> k must also be a direct match i -> k.

    Violations are reported as (i, j, k, a, c) tuples. Structural problems
    (a row or column with two matches, P_ii != I, P_ji != P_ij^T) are
    reported as ("structure", i, j) entries.
    """
    violations = []
    n = m.n_views
    for i in range(n):
        if not np.array_equal(m.p(i, i), np.eye(m.sizes[i], dtype=np.int64)):
            violations.append(("structure", i, i))
        for j in range(n):
            p = m.p(i, j)
            if p.size and (p.sum(axis=0).max() > 1 or p.sum(axis=1).max() > 1):
                violations.append(("structure", i, j))
            if not np.array_equal(p, m.p(j, i).T):
                violations.append(("structure", i, j))
    for i, j, k in itertools.product(range(n), repeat=3):
        two_step = (m.p(i, j) @ m.p(j, k)) > 0
        bad = two_step & (m.p(i, k) == 0)
        for a, c in zip(*np.nonzero(bad)):
            violations.append((i, j, k, int(a), int(c)))
    return Verdict(not violations, violations)


def proposition1_verify(m: MultiViewMatching, check: bool = True) -> Verdict:
    """Compare P_ii, P_ij P_ji and P_ij P_jk P_ki with the enumerated masks."""
    if check:
        pre = check_consistency(m)
        if not pre:
            raise InconsistentMatchingError(f"matching is not consistent: {pre.violations[:5]}")
    failures = []
    n = m.n_views
    for i in range(n):
        if not np.array_equal(m.p(i, i), np.eye(m.sizes[i], dtype=np.int64)):
            failures.append(("identity", i))
    for i, j in itertools.product(range(n), repeat=2):
        if not np.array_equal(m.p(i, j) @ m.p(j, i), mask_iji(m, i, j)):
            failures.append(("pair", i, j))
    for i, j, k in itertools.product(range(n), repeat=3):
        if not np.array_equal(m.p(i, j) @ m.p(j, k) @ m.p(k, i), mask_ijki(m, i, j, k)):
            failures.append(("triple", i, j, k))
    return Verdict(not failures, failures)


def random_consistent_matching(n_views: int, n_identities: int, visibility_prob: float,
                               seed=None) -> MultiViewMatching:
    """Views that each see an independent random subset of a shared identity pool."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if not 0 < visibility_prob <= 1:
        raise ValueError("visibility_prob must be in (0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    identities = []
    for _ in range(n_views):
        visible = np.flatnonzero(rng.random(n_identities) < visibility_prob)
        identities.append([int(x) for x in rng.permutation(visible)])
    return MultiViewMatching.from_identities(identities)


def mutate(m: MultiViewMatching, rng) -> tuple[MultiViewMatching, tuple] | None:
    """Drop one direct link P_ij[a, b] that is still implied through a third view.

    The link is removed from both P_ij and P_ji, so the result stays a valid
    set of partial matchings and only the cycle condition can catch it.
    Returns the mutated matching and the dropped (i, j, a, b), or None if no
    link is reachable through a third view.
    """
    candidates = []
    for i, j in itertools.permutations(range(m.n_views), 2):
        if i > j:
            continue
        for k in range(m.n_views):
            if k in (i, j):
                continue
            implied = (m.p(i, k) @ m.p(k, j)) & m.p(i, j)
            candidates += [(i, j, int(a), int(b)) for a, b in zip(*np.nonzero(implied))]
    if not candidates:
        return None
    i, j, a, b = candidates[rng.integers(len(candidates))]
    mats = {key: v.copy() for key, v in m.matchings.items()}
    mats[(i, j)][a, b] = 0
    mats[(j, i)][b, a] = 0
    return MultiViewMatching(list(m.sizes), mats), (i, j, a, b)
