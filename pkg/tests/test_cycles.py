import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partialcycle import autodiff as ad
from partialcycle.autodiff import ShapeError
from partialcycle.cycles import (VARIANTS, CycleBuilder, SimilarityMatrix, TemperatureConfig, ViewEmbeddings,
                                 adaptive_tau, cosine_similarities, normalize_rows, pairwise_cycle,
                                 soft_match, triple_cycles, view_similarities)
from partialcycle.loss import symmetric_margin_loss


def one_hot_view(view_id, ids, dim=8):
    return ViewEmbeddings(view_id, np.eye(dim)[ids])


def random_view(rng, view_id, n, dim=6):
    return ViewEmbeddings(view_id, normalize_rows(rng.standard_normal((n, dim))))


def test_embeddings_must_be_unit_rows():
    with pytest.raises(ShapeError):
        ViewEmbeddings(0, [[1.0, 1.0]])
    with pytest.raises(ShapeError):
        ViewEmbeddings(0, np.zeros((0, 3)))


def test_cosine_examples():
    v = normalize_rows([[0.3, 0.4]])
    assert np.allclose(cosine_similarities(ViewEmbeddings(0, v), ViewEmbeddings(1, v)).s.value, [[1.0]], atol=1e-15)
    e1, e2 = ViewEmbeddings(0, [[1.0, 0.0]]), ViewEmbeddings(1, [[0.0, 1.0]])
    assert cosine_similarities(e1, e2).s.value[0, 0] == 0.0


def test_cosine_matches_loop():
    rng = np.random.default_rng(0)
    a, b = random_view(rng, 0, 4), random_view(rng, 1, 3)
    s = cosine_similarities(a, b).s.value
    for p in range(4):
        for q in range(3):
            dot = sum(a.vectors.value[p, d] * b.vectors.value[q, d] for d in range(6))
            assert abs(s[p, q] - dot) < 1e-12


def test_cosine_dimension_mismatch():
    with pytest.raises(ShapeError):
        cosine_similarities(ViewEmbeddings(0, [[1.0, 0.0]]), ViewEmbeddings(1, [[1.0, 0.0, 0.0]]))


def test_similarity_entries_bounded_and_transposed():
    rng = np.random.default_rng(1)
    a, b = random_view(rng, 0, 5), random_view(rng, 1, 3)
    s = cosine_similarities(a, b)
    assert np.all(np.abs(s.s.value) <= 1 + 1e-12)
    assert np.array_equal(cosine_similarities(b, a).s.value, s.T.s.value)


def test_adaptive_tau_values():
    assert abs(adaptive_tau(1) - 3 * math.log(2)) < 1e-12
    assert abs(adaptive_tau(1) - 2.0794) < 1e-4
    assert abs(adaptive_tau(20) - 3 * math.log(21)) < 1e-12
    assert abs(adaptive_tau(20) - 9.1336) < 1e-4
    with pytest.raises(ValueError):
        adaptive_tau(0)
    with pytest.raises(ValueError):
        TemperatureConfig(tau0=0.0)


@given(st.integers(1, 10_000))
def test_adaptive_tau_monotone(n):
    assert adaptive_tau(n + 1) > adaptive_tau(n)


def test_soft_match_sharpens_to_identity():
    s = SimilarityMatrix(0, 1, ad.constant(np.eye(2)))
    a_ij, a_ji = soft_match(s, tau=20.0)
    assert np.max(np.abs(a_ij.value - np.eye(2))) < 1e-3
    assert np.max(np.abs(a_ji.value - np.eye(2))) < 1e-3


def test_soft_match_single_row_and_temperatures():
    row = np.array([[0.2, -0.1, 0.5]])
    a_ij, a_ji = soft_match(SimilarityMatrix(0, 1, ad.constant(row)))
    expect = np.exp(adaptive_tau(3) * row) / np.exp(adaptive_tau(3) * row).sum()
    assert np.allclose(a_ij.value, expect, atol=1e-14)
    # each column of S becomes a single-candidate row, so A_ji is all ones
    assert np.array_equal(a_ji.value, np.ones((3, 1)))


def test_soft_matchings_are_not_transposes():
    rng = np.random.default_rng(2)
    s = cosine_similarities(random_view(rng, 0, 3), random_view(rng, 1, 4))
    a_ij, a_ji = soft_match(s)
    assert not np.allclose(a_ij.value, a_ji.value.T)
    assert np.allclose(a_ij.value.sum(axis=1), 1) and np.allclose(a_ji.value.sum(axis=1), 1)


def test_pairwise_cycle_perfect_features():
    a = one_hot_view(0, [0, 1, 2])
    b = one_hot_view(1, [0, 1, 2])
    cyc = pairwise_cycle(*soft_match(cosine_similarities(a, b), tau=20.0))
    assert cyc.variant == "pairwise" and cyc.n == 3
    assert np.max(np.abs(cyc.a.value - np.eye(3))) < 1e-2


def test_pairwise_cycle_shape_error():
    with pytest.raises(ShapeError):
        pairwise_cycle(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_missing_person_has_lower_diagonal():
    # person 1 is absent from view j; view j also holds a stranger (id 5)
    i = one_hot_view(0, [0, 1])
    j = one_hot_view(1, [0, 5])
    cyc = pairwise_cycle(*soft_match(cosine_similarities(i, j)))
    d = np.diag(cyc.a.value)
    assert d[1] < d[0]


def _builder(views, tau=None):
    return CycleBuilder(view_similarities(views), TemperatureConfig(), tau)


def test_triple_identical_views_give_identity():
    views = [one_hot_view(v, [0, 1, 2, 3]) for v in range(3)]
    for cyc in _builder(views, tau=20.0).triple(0, 1, 2):
        assert np.max(np.abs(cyc.a.value - np.eye(4))) < 1e-2


def test_figure_two_configuration():
    # a is seen in all three views; a' is missing from view k
    i = one_hot_view(0, [0, 1])
    j = one_hot_view(1, [0, 1])
    k = one_hot_view(2, [0, 6])
    for cyc in _builder([i, j, k]).triple(0, 1, 2):
        d = np.diag(cyc.a.value)
        assert d[0] > d[1], cyc.variant


def test_triple_cycles_formulas():
    rng = np.random.default_rng(3)
    views = [random_view(rng, 0, 3), random_view(rng, 1, 5), random_view(rng, 2, 4)]
    s = {(0, 1): cosine_similarities(views[0], views[1]),
         (1, 2): cosine_similarities(views[1], views[2]),
         (2, 0): cosine_similarities(views[2], views[0])}
    out = {c.variant: c.a.value for c in triple_cycles(s[(0, 1)], s[(1, 2)], s[(2, 0)])}

    def f(m):
        t = adaptive_tau(m.shape[1])
        e = np.exp(t * (m - m.max(axis=1, keepdims=True)))
        return e / e.sum(axis=1, keepdims=True)

    sij, sjk, ski = (s[k].s.value for k in [(0, 1), (1, 2), (2, 0)])
    sijk, skij, sjki = sij @ sjk, ski @ sij, sjk @ ski
    expect = {
        "v0": f(sij) @ f(sjk) @ f(ski),
        "v1": f(sijk) @ f(sijk.T),
        "v2": f(sijk) @ f(ski),
        "v3": f(sijk) @ f(skij) @ f(sjki),
    }
    for v in VARIANTS:
        assert np.allclose(out[v], expect[v], atol=1e-12), v


def test_triple_cycles_shape_error():
    z = lambda r, c: SimilarityMatrix(0, 1, ad.constant(np.zeros((r, c))))
    with pytest.raises(ShapeError):
        triple_cycles(z(2, 3), z(3, 4), z(3, 2))


def test_unknown_variant():
    views = [one_hot_view(v, [0, 1]) for v in range(3)]
    with pytest.raises(ValueError):
        _builder(views).triple(0, 1, 2, variants=("v7",))


def test_all_cycles_counts():
    rng = np.random.default_rng(4)
    views = [random_view(rng, v, 2 + v % 3) for v in range(6)]
    cycles = _builder(views).all_cycles(range(6))
    assert sum(c.variant == "pairwise" for c in cycles) == 15
    assert sum(c.variant != "pairwise" for c in cycles) == 4 * 20
    only_v1 = _builder(views).all_cycles(range(6), ("v1",), pairwise=False)
    assert len(only_v1) == 20


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=3, max_size=3), st.integers(0, 10_000))
def test_cycles_are_row_stochastic_and_anchor_shaped(sizes, seed):
    rng = np.random.default_rng(seed)
    views = [random_view(rng, v, n) for v, n in enumerate(sizes)]
    b = _builder(views)
    for cyc in [b.pairwise(0, 1), b.pairwise(0, 2)] + b.triple(0, 1, 2):
        assert cyc.a.shape == (sizes[0], sizes[0])
        assert np.all(np.abs(cyc.a.value.sum(axis=1) - 1) < 1e-9)
        assert np.all(cyc.a.value > 0) and np.all(cyc.a.value <= 1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_transposed_cycle_has_same_symmetric_loss(n, seed):
    rng = np.random.default_rng(seed)
    views = [random_view(rng, v, n + v) for v in range(3)]
    for cyc in _builder(views).triple(0, 1, 2):
        a = symmetric_margin_loss(cyc.a, 0.5).item()
        b = symmetric_margin_loss(ad.transpose(cyc.a), 0.5).item()
        assert a == b
