import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsel.clustering import Clustering
from fedsel.selection import (
    Scheme, allocate_neyman, allocate_plain, cluster_design, hybrid_design, importance_design, make_design,
    random_design, select_cluster, select_importance, select_random,
)


def frequencies(design, n_draws, seed=0):
    ids, _ = design.sample_batch(seed, n_draws)
    counts = np.zeros(design.n_clients)
    for row in ids:
        counts[np.unique(row)] += 1
    return counts / n_draws


# --- random ---------------------------------------------------------------

def test_random_full_census():
    plan = select_random(7, 7, seed=3)
    assert sorted(plan.chosen.tolist()) == list(range(7))
    np.testing.assert_allclose(plan.agg_weight, 1 / 7)
    np.testing.assert_allclose(plan.inclusion_prob, 1.0)


def test_random_inclusion_frequency():
    freq = frequencies(random_design(5, 2), 60000)
    assert np.all(np.abs(freq - 0.4) <= 0.01)


@pytest.mark.parametrize("m", [0, 6, -1])
def test_random_rejects_bad_m(m):
    with pytest.raises(ValueError):
        select_random(5, m, seed=0)


def test_random_weights_follow_omega():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    plan = select_random(4, 2, seed=1, weights=w)
    np.testing.assert_allclose(plan.agg_weight, (4 / 2) * w[plan.chosen])


@given(st.integers(1, 40), st.data())
def test_without_replacement_never_repeats(n, data):
    m = data.draw(st.integers(1, n))
    ids, _ = random_design(n, m).sample_batch(data.draw(st.integers(0, 2**31)), 50)
    assert all(len(set(row)) == m for row in ids.tolist())


# --- importance -----------------------------------------------------------

def test_importance_probabilities():
    design = importance_design([3.0, 1.0, 1.0], 2)
    np.testing.assert_allclose(design.strata[0].probs, [0.6, 0.2, 0.2])
    plan = design.sample(0)
    np.testing.assert_allclose(plan.agg_weight, (1 / 3) / (2 * design.strata[0].probs[plan.chosen]))


def test_importance_equal_norms_is_uniform_with_replacement():
    design = importance_design(np.ones(4), 3)
    ids, _ = design.sample_batch(5, 60000)
    draw_freq = np.bincount(ids.ravel(), minlength=4) / ids.size
    assert np.all(np.abs(draw_freq - 0.25) <= 0.01)
    assert any(len(set(r)) < 3 for r in ids[:200].tolist())


def test_importance_single_nonzero_norm():
    plan = select_importance([0.0, 2.0, 0.0], 3, seed=9)
    assert plan.chosen.tolist() == [1, 1, 1]
    assert plan.agg_weight.sum() == pytest.approx(1 / 3)


def test_importance_all_zero_rejected():
    with pytest.raises(ValueError):
        select_importance([0.0, 0.0], 1, seed=0)


# --- allocation -----------------------------------------------------------

def test_plain_allocation_examples():
    assert allocate_plain([50, 50], 10).tolist() == [5, 5]
    assert allocate_plain([60, 40], 10).tolist() == [6, 4]
    assert allocate_plain([1, 1, 1], 2).tolist() == [1, 1, 0]


def test_neyman_allocation_examples():
    assert allocate_neyman([60, 40], [1, 4], 10).tolist() == [3, 7]
    assert allocate_neyman([60, 40], [2.5, 2.5], 10).tolist() == allocate_plain([60, 40], 10).tolist()
    assert allocate_neyman([10, 2], [0, 5], 5).tolist() == [3, 2]
    assert allocate_neyman([4, 6], [0, 0], 5).tolist() == allocate_plain([4, 6], 5).tolist()


sizes_st = st.lists(st.integers(1, 40), min_size=1, max_size=8)


@given(sizes_st, st.data())
def test_allocation_invariants(sizes, data):
    n = sum(sizes)
    m = data.draw(st.integers(1, n))
    stats = data.draw(st.lists(st.floats(0, 100), min_size=len(sizes), max_size=len(sizes)))
    c = data.draw(st.floats(1e-3, 1e3))
    for alloc in (allocate_plain(sizes, m), allocate_neyman(sizes, stats, m)):
        assert alloc.sum() == m
        assert np.all(alloc >= 0) and np.all(alloc <= np.array(sizes))
    assert np.array_equal(allocate_neyman(sizes, stats, m), allocate_neyman(sizes, [c * s for s in stats], m))


@given(sizes_st, st.data())
def test_uncapped_neyman_is_within_one_of_proportional(sizes, data):
    n = sum(sizes)
    m = data.draw(st.integers(1, n))
    stats = np.array(data.draw(st.lists(st.floats(0.1, 10), min_size=len(sizes), max_size=len(sizes))))
    raw = m * np.array(sizes) * stats / (np.array(sizes) * stats).sum()
    if np.any(raw > np.array(sizes)):
        return
    alloc = allocate_neyman(sizes, stats, m)
    assert np.all(np.abs(alloc - raw) < 1 + 1e-9)


# --- clustered schemes ----------------------------------------------------

def _clustering(assign):
    return Clustering.from_assignments(np.array(assign))


def test_cluster_plain_weights_and_allocation():
    cl = _clustering([0, 0, 0, 1, 1, 2])
    plan = select_cluster(cl, 3, seed=4)
    assert plan.allocation.tolist() == [2, 1, 0]
    sizes = np.array([3, 3, 3, 2, 2, 1])
    alloc = plan.allocation[cl.assignments[plan.chosen]]
    np.testing.assert_allclose(plan.agg_weight, (1 / 6) * sizes[plan.chosen] / alloc)


def test_singleton_clusters_with_full_sample_select_everyone():
    cl = _clustering(list(range(5)))
    plan = select_cluster(cl, 5, seed=0)
    assert sorted(plan.chosen.tolist()) == list(range(5))
    np.testing.assert_allclose(plan.agg_weight, 0.2)


def test_cluster_neyman_uses_stats():
    cl = _clustering([0] * 60 + [1] * 40)
    plan = select_cluster(cl, 10, seed=0, allocation_mode="neyman", stats=[1.0, 4.0])
    assert plan.allocation.tolist() == [3, 7]
    assert np.bincount(cl.assignments[plan.chosen], minlength=2).tolist() == [3, 7]


def test_hybrid_single_cluster_equals_importance():
    norms = np.array([1.0, 2.0, 3.0, 4.0])
    h = hybrid_design(_clustering([0, 0, 0, 0]), [1.0], norms, 3)
    imp = importance_design(norms, 3)
    np.testing.assert_allclose(h.strata[0].probs, imp.strata[0].probs)
    w = np.full(4, 0.25)
    np.testing.assert_allclose(h.strata[0].draw_coefficients(w), imp.strata[0].draw_coefficients(w))


def test_hybrid_with_equal_norms_and_stats_matches_plain_allocation_uniform_draws():
    cl = _clustering([0] * 6 + [1] * 4)
    h = hybrid_design(cl, [2.0, 2.0], np.ones(10), 5)
    p = cluster_design(cl, 5, "plain")
    assert h.allocation.tolist() == p.allocation.tolist()
    for s in h.strata:
        np.testing.assert_allclose(s.probs, 1 / s.size)


def test_hybrid_zero_norm_cluster_falls_back_to_uniform(caplog):
    cl = _clustering([0, 0, 1, 1])
    with caplog.at_level("INFO"):
        h = hybrid_design(cl, [1.0, 1.0], np.array([0.0, 0.0, 1.0, 3.0]), 2)
    np.testing.assert_allclose(h.strata[0].probs, [0.5, 0.5])
    assert caplog.records


def test_make_design_dispatch():
    cl = _clustering([0, 0, 1, 1])
    norms = np.array([1.0, 2.0, 1.0, 1.0])
    for scheme in Scheme:
        d = make_design(scheme, n_clients=4, m=2, clustering=cl, stats=np.array([1.0, 2.0]), norms=norms)
        assert d.m == 2
        assert d.scheme == scheme.value
    with pytest.raises(ValueError):
        make_design(Scheme.HYBRID, n_clients=4, m=2)


def test_plan_inclusion_probabilities_match_frequencies():
    cl = _clustering([0, 0, 0, 1, 1, 1, 1])
    norms = np.array([1.0, 2.0, 3.0, 1.0, 1.0, 5.0, 1.0])
    design = hybrid_design(cl, [1.0, 2.0], norms, 4)
    freq = frequencies(design, 60000, seed=1)
    assert np.all(np.abs(freq - design.inclusion_probabilities()) < 0.01)
