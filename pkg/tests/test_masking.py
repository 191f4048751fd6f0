import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partialcycle.autodiff import ShapeError
from partialcycle.cycles import TemperatureConfig
from partialcycle.masking import (CycleMask, MaskBuilder, PartialMatching, pairwise_pseudo_mask, pseudo_mask,
                                  pseudo_mask_enumerated, pseudo_matches)
from partialcycle.theory import ground_truth_masks, random_consistent_matching


def matching(p, i=0, j=1):
    return PartialMatching(i, j, np.array(p))


def random_partial(rng, n_i, n_j, density=0.6):
    """Random strict partial matching between views of size n_i and n_j."""
    p = np.zeros((n_i, n_j), dtype=np.int64)
    cols = list(rng.permutation(n_j))
    for a in rng.permutation(n_i):
        if cols and rng.random() < density:
            p[a, cols.pop()] = 1
    return p


def test_partial_matching_validation():
    matching([[1, 0], [0, 1]])
    with pytest.raises(ShapeError):
        matching([[1, 1], [0, 0]])
    with pytest.raises(ShapeError):
        matching([[1, 0], [1, 0]])
    with pytest.raises(ShapeError):
        matching([[2, 0]])


def test_mask_validation():
    assert np.array_equal(CycleMask(0, [1, 0, 1]).matrix(), np.diag([1.0, 0.0, 1.0]))
    with pytest.raises(ShapeError):
        CycleMask(0, [0, 2])


def test_pseudo_match_hand_example():
    # softmax of [0.9, -0.9] at tau 5 puts 1 / (1 + e^-9) on the first entry
    p = pseudo_matches(np.array([[0.9, -0.9]]), tau=5.0)
    assert np.array_equal(p.p, [[1, 0]])


def test_uniform_row_gives_no_match():
    for n in (2, 3, 7):
        assert pseudo_matches(np.full((1, n), 0.3)).p.sum() == 0


def test_pseudo_matches_use_the_smaller_view():
    # three detections in i, two in j: softmax runs over the columns of S
    s = np.array([[0.9, 0.0], [0.85, 0.1], [0.0, 0.95]])
    p = pseudo_matches(s, tau=20.0).p
    assert p.sum(axis=0).max() <= 1
    assert np.array_equal(p, [[1, 0], [0, 0], [0, 1]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_swapped_argument_order_gives_transpose(n_i, n_j, seed):
    s = np.random.default_rng(seed).uniform(-1, 1, (n_i, n_j))
    if n_i == n_j:
        return  # equal sizes take the row orientation in both calls
    assert np.array_equal(pseudo_matches(s.T).p, pseudo_matches(s).p.T)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000), st.floats(0.5, 30.0))
def test_smaller_view_gets_at_most_one_partner(n_i, n_j, seed, tau):
    s = np.random.default_rng(seed).uniform(-1, 1, (n_i, n_j))
    p = pseudo_matches(s, tau=tau).p
    axis = 1 if n_i <= n_j else 0
    assert p.sum(axis=axis).max(initial=0) <= 1


def test_figure_two_mask():
    p_ij = matching(np.eye(2, dtype=int), 0, 1)
    p_jk = matching([[1], [0]], 1, 2)
    p_ki = matching([[1, 0]], 2, 0)
    assert np.array_equal(pseudo_mask(p_ij, p_jk, p_ki).d, [1, 0])
    assert np.array_equal(pseudo_mask_enumerated(p_ij, p_jk, p_ki).d, [1, 0])


def test_identity_and_empty_masks():
    eye = matching(np.eye(3, dtype=int))
    assert np.array_equal(pseudo_mask(eye, eye, eye).d, [1, 1, 1])
    zero = matching(np.zeros((3, 3), dtype=int))
    assert np.array_equal(pseudo_mask(eye, zero, eye).d, [0, 0, 0])
    assert np.array_equal(pseudo_mask(zero, eye, eye).d, [0, 0, 0])


def test_mask_shape_error():
    with pytest.raises(ShapeError):
        pseudo_mask(matching(np.eye(2, dtype=int)), matching(np.eye(3, dtype=int)), matching(np.eye(2, dtype=int)))


def test_pairwise_mask_examples():
    assert np.array_equal(pairwise_pseudo_mask(matching(np.eye(2, dtype=int))).d, [1, 1])
    assert np.array_equal(pairwise_pseudo_mask(matching([[0, 0], [1, 0]])).d, [0, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_pairwise_mask_vectorised_oracle(n_i, n_j, seed):
    p = random_partial(np.random.default_rng(seed), n_i, n_j)
    expect = (np.diag(p @ p.T) >= 1).astype(int)
    assert np.array_equal(pairwise_pseudo_mask(matching(p)).d, expect)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=3, max_size=3), st.integers(0, 10_000))
def test_enumeration_equals_vectorised(sizes, seed):
    rng = np.random.default_rng(seed)
    n_i, n_j, n_k = sizes
    p_ij = matching(random_partial(rng, n_i, n_j), 0, 1)
    p_jk = matching(random_partial(rng, n_j, n_k), 1, 2)
    p_ki = matching(random_partial(rng, n_k, n_i), 2, 0)
    assert np.array_equal(pseudo_mask(p_ij, p_jk, p_ki).d, pseudo_mask_enumerated(p_ij, p_jk, p_ki).d)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=3, max_size=3), st.integers(0, 10_000))
def test_mask_order_invariance(sizes, seed):
    rng = np.random.default_rng(seed)
    n_i, n_j, n_k = sizes
    p_ij = matching(random_partial(rng, n_i, n_j), 0, 1)
    p_jk = matching(random_partial(rng, n_j, n_k), 1, 2)
    p_ki = matching(random_partial(rng, n_k, n_i), 2, 0)
    forward = pseudo_mask(p_ij, p_jk, p_ki).d
    backward = pseudo_mask(p_ki.T, p_jk.T, p_ij.T).d
    assert np.array_equal(forward, backward)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_degenerate_triple_reduces_to_pairwise(n_i, n_j, seed):
    p = matching(random_partial(np.random.default_rng(seed), n_i, n_j), 0, 1)
    eye = matching(np.eye(n_j, dtype=int), 1, 1)
    assert np.array_equal(pseudo_mask(p, eye, p.T).d, pairwise_pseudo_mask(p).d)


def test_mask_builder_shares_one_mask_per_triple():
    rng = np.random.default_rng(5)
    sims = {(0, 1): rng.uniform(-1, 1, (3, 4)), (0, 2): rng.uniform(-1, 1, (3, 5)),
            (1, 2): rng.uniform(-1, 1, (4, 5))}
    b = MaskBuilder(sims)
    assert np.array_equal(b.triple(0, 1, 2).d, b.triple(0, 2, 1).d)
    assert np.array_equal(b.matching(1, 0).p, b.matching(0, 1).p.T)


def one_hot_similarities(identities, dim):
    emb = [np.eye(dim)[ids] for ids in identities]
    return {(x, y): emb[x] @ emb[y].T for x in range(len(emb)) for y in range(len(emb)) if x < y}


def test_perfect_features_reproduce_ground_truth_masks():
    rng = np.random.default_rng(6)
    for _ in range(200):
        m = random_consistent_matching(3, 8, rng.uniform(0.3, 1.0), rng)
        if min(m.sizes) < 2:
            continue  # a single candidate always wins its softmax
        b = MaskBuilder(one_hot_similarities(m.identities, 8), TemperatureConfig(), tau=20.0)
        for i, j, k in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
            gt_pair, gt_triple = ground_truth_masks(m, i, j, k)
            assert np.array_equal(b.triple(i, j, k).d, gt_triple)
            assert np.array_equal(b.pair(i, j).d, gt_pair)


def test_single_candidate_always_matches():
    # one detection on the short side: softmax over one entry is 1 whatever the similarity
    assert np.array_equal(pseudo_matches(np.array([[-0.9]])).p, [[1]])


def test_two_small_view_elements_may_share_a_partner():
    s = np.array([[0.9, 0.0, 0.0], [0.9, 0.0, 0.0]])
    p = pseudo_matches(s, tau=20.0)
    assert np.array_equal(p.p, [[1, 0, 0], [1, 0, 0]]) and not p.strict
    with pytest.raises(ShapeError):
        PartialMatching(0, 1, p.p)
