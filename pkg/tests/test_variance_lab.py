import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fedsel.selection import allocate_neyman, allocate_plain
from fedsel.variance_lab import (
    EnumerationTooLarge, Population, decomposition_check, design_for, enumerate_design_moments,
    enumerate_variance, gap_terms, homogeneous_fixture, importance_trace_gap, jackknife_trace_variance,
    monte_carlo_variance, outcome_count, srs_variance_closed, standard_fixture, stratified_variance_closed, stratum_std,
    scheme_variance_report,
)


# --- independent enumeration oracle -----------------------------------------

def oracle_moments(updates, weights, strata, alloc, probs=None):
    """Exact mean and trace variance of a stratified estimator by listing every joint outcome.

    Without replacement (probs None): every m_h-subset equally likely, weight omega N_h / m_h.
    With replacement: ordered m_h-tuples, probability prod p, weight omega / (m_h p).
    """
    per_stratum = []
    for h, (members, m_h) in enumerate(zip(strata, alloc)):
        outcomes = []
        if m_h == 0:
            per_stratum.append([(1.0, np.zeros(updates.shape[1]))])
            continue
        if probs is None:
            subsets = list(itertools.combinations(members, m_h))
            for sub in subsets:
                est = sum(weights[k] * len(members) / m_h * updates[k] for k in sub)
                outcomes.append((1.0 / len(subsets), est))
        else:
            p = dict(zip(members, probs[h]))
            for tup in itertools.product(members, repeat=m_h):
                pr = math.prod(p[k] for k in tup)
                if pr == 0:
                    continue
                est = sum(weights[k] / (m_h * p[k]) * updates[k] for k in tup)
                outcomes.append((pr, est))
        per_stratum.append(outcomes)
    mean = np.zeros(updates.shape[1])
    second = 0.0
    for combo in itertools.product(*per_stratum):
        pr = math.prod(c[0] for c in combo)
        est = sum(c[1] for c in combo)
        mean += pr * est
        second += pr * float(est @ est)
    return mean, second - float(mean @ mean)


def _strata(pop):
    return [list(s) for s in pop.strata()]


# --- closed forms -----------------------------------------------------------

def test_srs_fixture_value():
    pop = Population(np.array([1.0, 2.0, 3.0, 4.0]))
    assert srs_variance_closed(pop, 2) == pytest.approx(5 / 12, rel=1e-12)
    # by hand: the six pair means 1.5, 2, 2.5, 2.5, 3, 3.5 around 2.5 give 2.5 / 6
    means = [np.mean(c) for c in itertools.combinations([1, 2, 3, 4], 2)]
    assert np.var(means) == pytest.approx(5 / 12, rel=1e-12)
    assert enumerate_variance(pop, "rand", 2) == pytest.approx(5 / 12, rel=1e-12)


def test_srs_degenerate_cases():
    pop = Population(np.random.default_rng(0).normal(size=(6, 2)))
    assert srs_variance_closed(pop, 6) == pytest.approx(0.0, abs=1e-15)
    assert srs_variance_closed(Population(np.ones((5, 3))), 2) == 0.0
    with pytest.raises(ValueError):
        srs_variance_closed(pop, 7)


def test_stratified_fixture_value():
    pop = Population(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0, 0, 1, 1]))
    assert stratified_variance_closed(pop, [1, 1]) == pytest.approx(0.125, rel=1e-12)
    assert enumerate_variance(pop, "cluster", 2) == pytest.approx(0.125, rel=1e-12)
    _, v = oracle_moments(pop.updates, pop.weights, _strata(pop), [1, 1])
    assert v == pytest.approx(0.125, rel=1e-12)


def test_stratified_special_cases():
    rng = np.random.default_rng(3)
    homo = Population(np.repeat(rng.normal(size=(3, 2)), 4, axis=0), np.repeat(np.arange(3), 4))
    assert stratified_variance_closed(homo, [1, 2, 1]) == pytest.approx(0.0, abs=1e-15)
    pop = Population(rng.normal(size=(9, 2)), np.zeros(9, dtype=int))
    assert stratified_variance_closed(pop, [4]) == pytest.approx(srs_variance_closed(pop, 4), rel=1e-12)


def test_stratified_unsampled_stratum_reports_mse_with_warning():
    pop = Population(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0, 0, 1, 1]))
    with pytest.warns(RuntimeWarning):
        v = stratified_variance_closed(pop, [2, 0])
    assert v == pytest.approx((0.25 * 3 + 0.25 * 4) ** 2)


def random_population(rng, max_n=8, max_h=3, dim=None, weights=False):
    n = int(rng.integers(2, max_n + 1))
    h = int(rng.integers(1, min(max_h, n) + 1))
    labels = np.concatenate([np.arange(h), rng.integers(0, h, n - h)])
    rng.shuffle(labels)
    d = dim or int(rng.integers(1, 4))
    w = rng.dirichlet(np.ones(n)) if weights else None
    return Population(rng.normal(size=(n, d)) * rng.uniform(0.5, 3), labels, np.abs(rng.normal(size=n)) + 0.1, w)


def test_closed_forms_match_independent_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(20):
        pop = random_population(rng, weights=bool(rng.integers(0, 2)))
        m = int(rng.integers(1, pop.n + 1))
        _, v_srs = oracle_moments(pop.updates, pop.weights, [list(range(pop.n))], [m])
        assert srs_variance_closed(pop, m) == pytest.approx(v_srs, rel=1e-9, abs=1e-12)
        strata = _strata(pop)
        alloc = [int(rng.integers(1, len(s) + 1)) for s in strata]
        _, v_str = oracle_moments(pop.updates, pop.weights, strata, alloc)
        assert stratified_variance_closed(pop, alloc) == pytest.approx(v_str, rel=1e-9, abs=1e-12)


def test_library_enumeration_matches_oracle_for_every_scheme():
    rng = np.random.default_rng(5)
    for _ in range(15):
        pop = random_population(rng, max_n=6, weights=True)
        target = pop.weights @ pop.updates
        m = int(rng.integers(1, pop.n + 1))
        strata = _strata(pop)
        sizes = [len(s) for s in strata]
        stds = stratum_std(pop)
        cases = {
            "random": ([list(range(pop.n))], [m], None),
            "importance": ([list(range(pop.n))], [m], [pop.norms / pop.norms.sum()]),
            "cluster_plain": (strata, allocate_plain(sizes, m), None),
            "cluster_neyman": (strata, allocate_neyman(sizes, stds, m), None),
            "hybrid": (strata, allocate_neyman(sizes, stds, m),
                       [pop.norms[s] / pop.norms[s].sum() for s in strata]),
        }
        for scheme, (st_, alloc, probs) in cases.items():
            mean, var = oracle_moments(pop.updates, pop.weights, st_, list(alloc), probs)
            lib_mean, lib_var = enumerate_design_moments(pop.updates, design_for(pop, scheme, m))
            np.testing.assert_allclose(lib_mean, mean, rtol=1e-9, atol=1e-12)
            assert lib_var == pytest.approx(var, rel=1e-9, abs=1e-12)
            if all(a >= 1 for a in alloc):
                np.testing.assert_allclose(mean, target, rtol=1e-9, atol=1e-12)  # unbiased


def test_enumeration_size_guard_and_census():
    pop = Population(np.random.default_rng(0).normal(size=(40, 2)))
    with pytest.raises(EnumerationTooLarge):
        enumerate_variance(pop, "rand", 20)
    assert enumerate_variance(pop, "rand", 40) == pytest.approx(0.0, abs=1e-15)


# --- decomposition --------------------------------------------------------

def test_decomposition_fixture():
    lhs, rhs, gap = decomposition_check(Population(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0, 0, 1, 1])))
    assert lhs == pytest.approx(5.0) and rhs == pytest.approx(5.0) and gap <= 1e-12


@given(arrays(np.float64, st.tuples(st.integers(2, 50), st.integers(1, 10)), elements=st.floats(-1e3, 1e3)),
       st.integers(1, 6), st.integers(0, 2**31))
def test_decomposition_identity_holds(x, h, seed):
    labels = np.random.default_rng(seed).integers(0, min(h, x.shape[0]), x.shape[0])
    lhs, rhs, gap = decomposition_check(Population(x, labels))
    assert gap <= 1e-9 * max(abs(lhs), 1e-300) + 1e-9


def test_single_cluster_decomposition():
    x = np.random.default_rng(1).normal(size=(10, 3))
    lhs, rhs, _ = decomposition_check(Population(x, np.zeros(10, dtype=int)))
    assert rhs == pytest.approx(lhs)


# --- importance gap ---------------------------------------------------------

def test_importance_trace_gap_examples():
    assert importance_trace_gap([2.0, 2.0, 2.0]) == 0.0
    assert importance_trace_gap([3.0, 1.0], 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        importance_trace_gap([0.0, 0.0])


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=30).filter(lambda g: sum(g) > 0))
def test_importance_trace_gap_nonnegative(g):
    assert importance_trace_gap(g) >= 0.0


# --- Monte Carlo ------------------------------------------------------------

def test_jackknife_matches_brute_force():
    y = np.random.default_rng(2).normal(size=(30, 3))
    var, se = jackknife_trace_variance(y)
    tr = lambda a: float(((a - a.mean(axis=0)) ** 2).sum() / (len(a) - 1))  # noqa: E731
    assert var == pytest.approx(tr(y))
    loo = np.array([tr(np.delete(y, i, axis=0)) for i in range(30)])
    assert se == pytest.approx(math.sqrt(29 / 30 * ((loo - loo.mean()) ** 2).sum()), rel=1e-9)


def test_mc_srs_fixture():
    pop = Population(np.array([1.0, 2.0, 3.0, 4.0]))
    v, se = monte_carlo_variance(pop, "rand", 2, 100_000, seed=1)
    assert abs(v - 5 / 12) <= 3 * se


def test_mc_degenerate_population():
    v, se = monte_carlo_variance(Population(np.ones((6, 2))), "rand", 3, 1000, seed=0)
    assert v == pytest.approx(0.0, abs=1e-24) and se == pytest.approx(0.0, abs=1e-24)


def test_mc_rejects_few_draws():
    with pytest.raises(ValueError):
        monte_carlo_variance(Population(np.ones(4)), "rand", 2, 999)


def test_mc_agrees_with_enumeration_on_random_fixtures():
    # Designs with very few outcomes are skipped: for a symmetric two-point estimator the sample
    # variance is flat in the observed proportion, so the jackknife SE collapses towards zero.
    rng = np.random.default_rng(17)
    checked = 0
    while checked < 20:
        pop = random_population(rng, max_n=7)
        m = int(rng.integers(1, pop.n + 1))
        designs = {s: design_for(pop, s, m) for s in ("rand", "cluster", "cludiv", "hybrid")}
        if min(outcome_count(d) for d in designs.values()) < 6:
            continue
        for scheme, design in designs.items():
            exact = enumerate_design_moments(pop.updates, design)[1]
            v, se = monte_carlo_variance(pop, scheme, m, 20_000, seed=checked)
            assert abs(v - exact) <= 3 * se, (checked, scheme, v, exact, se)
        checked += 1


def test_mc_matches_stratified_closed_form_within_two_percent():
    pop = standard_fixture()
    alloc = design_for(pop, "cluster", 20).allocation
    v, _ = monte_carlo_variance(pop, "cluster", 20, 100_000, seed=3)
    assert v == pytest.approx(stratified_variance_closed(pop, alloc), rel=0.02)


def test_high_dimensional_values_are_reduced_exactly():
    rng = np.random.default_rng(4)
    low = Population(rng.normal(size=(6, 3)))
    # embed in 50 dimensions by an orthonormal map: trace variance is unchanged
    q = np.linalg.qr(rng.normal(size=(50, 50)))[0][:, :3]
    high = Population(low.updates @ q.T)
    assert enumerate_variance(high, "rand", 2) == pytest.approx(enumerate_variance(low, "rand", 2), rel=1e-9)
    a, _ = monte_carlo_variance(high, "rand", 2, 5000, seed=0)
    b, _ = monte_carlo_variance(low, "rand", 2, 5000, seed=0)
    assert a == pytest.approx(b, rel=0.1)


# --- fixtures and the scheme ordering --------------------------------------

def test_standard_fixture_shape():
    pop = standard_fixture()
    assert pop.n == 200 and len(pop.strata()) == 4
    assert design_for(pop, "cluster", 20).allocation.tolist() == [4, 5, 5, 6]
    assert design_for(pop, "cludiv", 20).allocation.tolist() == [1, 3, 5, 11]


def test_standard_fixture_regression_values():
    # recorded when the fixture was frozen; closed forms are exact, so tight tolerances apply
    pop = standard_fixture()
    assert srs_variance_closed(pop, 20) == pytest.approx(0.8179780465335542, rel=1e-12)
    assert stratified_variance_closed(pop, [4, 5, 5, 6]) == pytest.approx(0.03500852714828512, rel=1e-12)
    assert stratified_variance_closed(pop, [1, 3, 5, 11]) == pytest.approx(0.023517312355752034, rel=1e-12)


def test_homogeneous_fixture_gap_terms_vanish():
    pop = homogeneous_fixture(cluster_size=50)
    between, variability, importance = gap_terms(pop, 20)
    assert between == pytest.approx(0.0, abs=1e-12)
    assert variability == pytest.approx(0.0, abs=1e-12)
    assert importance == pytest.approx(0.0, abs=1e-12)


def test_report_serialises():
    rep = scheme_variance_report(standard_fixture(), 20, n_draws=2000, seed=0)
    d = rep.to_dict()
    assert set(d["separations"]) == {"hybrid<cludiv", "cludiv<cluster", "cluster<rand"}
    assert d["method"].startswith("monte_carlo")
    assert all(v >= -1e-12 for v in rep.variances().values())
