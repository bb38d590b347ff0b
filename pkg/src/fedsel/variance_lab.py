"""Selection-variance laboratory.

Closed-form finite-population variances, exact enumeration over every
possible selection, and Monte Carlo estimates with jackknife standard errors
for the weighted aggregate produced by each selection scheme.  Vector-valued
updates are reduced to scalars through the trace of the covariance.

Estimand throughout is ``sum_k omega_k w_k``; with the default uniform
weights that is the plain population mean of the updates.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .clustering import Clustering
from .selection import SamplingDesign, Scheme, make_design

logger = logging.getLogger(__name__)

SCHEME_ORDER = ("hybrid", "cludiv", "cluster", "rand")
_LAB_SCHEMES = {
    "rand": Scheme.RANDOM,
    "cluster": Scheme.CLUSTER_PLAIN,
    "cludiv": Scheme.CLUSTER_NEYMAN,
    "hybrid": Scheme.HYBRID,
}


class EnumerationTooLarge(ValueError):
    """Raised when exact enumeration would visit too many outcomes; use Monte Carlo instead."""


@dataclass(eq=False)
class Population:
    updates: np.ndarray
    cluster_of: np.ndarray | None = None
    norms: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        u = np.asarray(self.updates, dtype=np.float64)
        self.updates = u[:, None] if u.ndim == 1 else u
        n = self.updates.shape[0]
        if self.cluster_of is not None:
            self.cluster_of = np.asarray(self.cluster_of, dtype=np.int64)
            if self.cluster_of.shape != (n,):
                raise ValueError("cluster_of must have one entry per client")
        if self.norms is None:
            self.norms = np.linalg.norm(self.updates, axis=1)
        else:
            self.norms = np.asarray(self.norms, dtype=np.float64)
            if self.norms.shape != (n,):
                raise ValueError("norms must have one entry per client")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (n,):
                raise ValueError("weights must have one entry per client")

    @property
    def n(self) -> int:
        return self.updates.shape[0]

    def strata(self) -> list[np.ndarray]:
        if self.cluster_of is None:
            return [np.arange(self.n)]
        return [np.flatnonzero(self.cluster_of == h) for h in range(int(self.cluster_of.max()) + 1)]

    def target(self) -> np.ndarray:
        return self.weights @ self.updates


def _with_clusters(pop: Population, clustering) -> Population:
    if clustering is None:
        return pop
    assignments = clustering.assignments if isinstance(clustering, Clustering) else np.asarray(clustering)
    return Population(pop.updates, assignments, pop.norms, pop.weights)


def _s2(x: np.ndarray) -> float:
    """Trace of the unbiased (N-1 denominator) covariance; 0 for one row."""
    if x.shape[0] < 2:
        return 0.0
    return float(((x - x.mean(axis=0)) ** 2).sum() / (x.shape[0] - 1))


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


def srs_variance_closed(pop: Population, m: int) -> float:
    """``(N - m) / (N m) * S^2`` for the expanded values ``N * omega_k * w_k``."""
    n = pop.n
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= N={n}, got m={m}")
    z = n * pop.weights[:, None] * pop.updates
    return (n - m) / (n * m) * _s2(z)


def stratified_variance_closed(pop: Population, allocation, clustering=None) -> float:
    """Exact variance of the stratified uniform-without-replacement estimator.

    A stratum with no draws is permitted: its total is missing from every
    draw, so its squared contribution is added as bias (the result is then an
    MSE) and a warning is emitted.
    """
    pop = _with_clusters(pop, clustering)
    strata = pop.strata()
    allocation = np.asarray(allocation, dtype=np.int64)
    if allocation.shape[0] != len(strata):
        raise ValueError(f"{len(strata)} strata but {allocation.shape[0]} allocations")
    total = 0.0
    missing = np.zeros(pop.updates.shape[1])
    for members, m_h in zip(strata, allocation):
        n_h = members.size
        if m_h > n_h or m_h < 0:
            raise ValueError(f"allocation {m_h} outside [0, {n_h}]")
        if m_h == 0:
            missing += pop.weights[members] @ pop.updates[members]
            continue
        z = n_h * pop.weights[members, None] * pop.updates[members]
        total += (n_h - m_h) / (n_h * m_h) * _s2(z)
    bias = float(missing @ missing)
    if bias > 0:
        warnings.warn("unsampled strata: result includes squared bias", RuntimeWarning, stacklevel=2)
    return total + bias


def decomposition_check(pop: Population, clustering=None):
    """Both sides of ``(N-1) S^2 = sum (N_h-1) S_h^2 + sum N_h ||W_h - W||^2``."""
    pop = _with_clusters(pop, clustering)
    w = pop.updates
    grand = w.mean(axis=0)
    lhs = float(((w - grand) ** 2).sum())
    within = between = 0.0
    for members in pop.strata():
        x = w[members]
        if x.shape[0] == 0:
            continue
        within += (x.shape[0] - 1) * _s2(x)
        diff = x.mean(axis=0) - grand
        between += x.shape[0] * float(diff @ diff)
    rhs = within + between
    return lhs, rhs, abs(lhs - rhs)


def importance_trace_gap(norms, n_h: int | None = None) -> float:
    """Per-draw second-moment reduction of norm-proportional over uniform selection.

    ``(sum g)^2 / N_h * sum (I_i - 1/N_h)^2`` with ``I_i = g_i / sum g``.
    """
    g = np.asarray(norms, dtype=np.float64)
    n_h = g.shape[0] if n_h is None else int(n_h)
    if n_h < 1 or g.shape[0] != n_h:
        raise ValueError("n_h must equal the number of norms and be >= 1")
    if np.any(g < 0):
        raise ValueError("norms must be non-negative")
    total = g.sum()
    if not total > 0:
        raise ValueError("all norms are zero; importance distribution is degenerate")
    share = g / total
    return float(total ** 2 / n_h * np.sum((share - 1.0 / n_h) ** 2))


# ---------------------------------------------------------------------------
# Designs for a population
# ---------------------------------------------------------------------------


def stratum_std(pop: Population) -> np.ndarray:
    """Per-stratum ``S_h``: square root of the trace of the unbiased covariance."""
    return np.array([math.sqrt(_s2(pop.updates[m])) for m in pop.strata()])


def design_for(pop: Population, scheme, m: int) -> SamplingDesign:
    """Sampling design of ``scheme`` on ``pop`` (lab names rand/cluster/cludiv/hybrid accepted)."""
    scheme = _LAB_SCHEMES.get(scheme, scheme)
    scheme = Scheme(scheme)
    strata = pop.strata() if scheme.clustered else None
    stats = stratum_std(pop) if scheme in (Scheme.CLUSTER_NEYMAN, Scheme.HYBRID) else None
    return make_design(scheme, n_clients=pop.n, m=m, clustering=strata, stats=stats,
                       norms=pop.norms, weights=pop.weights)


# ---------------------------------------------------------------------------
# Exact enumeration
# ---------------------------------------------------------------------------


def _stratum_outcomes(stratum, weights):
    if stratum.probs is None:
        combos = np.array(list(itertools.combinations(range(stratum.size), stratum.n_draws)), dtype=np.int64)
        probs = np.full(combos.shape[0], 1.0 / combos.shape[0])
    else:
        combos = np.array(list(itertools.product(range(stratum.size), repeat=stratum.n_draws)), dtype=np.int64)
        probs = np.prod(stratum.probs[combos], axis=1)
    coef = stratum.draw_coefficients(weights)
    return combos.reshape(-1, stratum.n_draws), probs, coef


def outcome_count(design: SamplingDesign) -> int:
    count = 1
    for s in design.strata:
        if s.n_draws == 0:
            continue
        count *= math.comb(s.size, s.n_draws) if s.probs is None else s.size ** s.n_draws
    return count


def enumerate_design_moments(values, design: SamplingDesign, max_outcomes: int = 1_000_000):
    """Exact mean vector and trace variance of a design's weighted aggregate.

    Every outcome of every stratum is visited with its probability; strata
    are independent, so the aggregate's mean and variance are the sums of the
    per-stratum ones.
    """
    values = np.asarray(values, dtype=np.float64)
    values = values[:, None] if values.ndim == 1 else values
    count = outcome_count(design)
    if count > max_outcomes:
        raise EnumerationTooLarge(f"{count} outcomes exceed the limit of {max_outcomes}; use monte_carlo_variance")
    mean = np.zeros(values.shape[1])
    var = 0.0
    for s in design.strata:
        if s.n_draws == 0:
            continue
        combos, probs, coef = _stratum_outcomes(s, design.weights)
        local_values = values[s.members]
        est = np.einsum("cm,cmd->cd", coef[combos], local_values[combos])
        mu = probs @ est
        mean += mu
        var += float(probs @ ((est - mu) ** 2).sum(axis=1))
    return mean, var


def enumerate_design_variance(values, design: SamplingDesign, max_outcomes: int = 1_000_000) -> float:
    return enumerate_design_moments(values, design, max_outcomes)[1]


def enumerate_variance(pop: Population, scheme, m: int, max_outcomes: int = 1_000_000) -> float:
    return enumerate_design_variance(pop.updates, design_for(pop, scheme, m), max_outcomes)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def jackknife_trace_variance(estimates: np.ndarray):
    """Sample trace variance of row vectors and its delete-one jackknife standard error."""
    y = np.asarray(estimates, dtype=np.float64)
    y = y[:, None] if y.ndim == 1 else y
    n = y.shape[0]
    if n < 3:
        raise ValueError("need at least 3 estimates")
    d = ((y - y.mean(axis=0)) ** 2).sum(axis=1)
    total = d.sum()
    var = total / (n - 1)
    loo = (total - n / (n - 1) * d) / (n - 2)
    se = math.sqrt((n - 1) / n * float(((loo - loo.mean()) ** 2).sum()))
    return float(var), se


def _reduce_columns(values: np.ndarray) -> np.ndarray:
    # distances, hence trace variances, are invariant under an orthonormal change of basis
    if values.shape[1] <= values.shape[0]:
        return values
    u, s, _ = np.linalg.svd(values, full_matrices=False)
    return u * s


def mc_trace_variance(values, design: SamplingDesign, n_draws: int, seed=0):
    """Monte Carlo trace variance of a design's weighted aggregate and its jackknife SE."""
    if n_draws < 1000:
        raise ValueError("n_draws must be >= 1000")
    values = np.asarray(values, dtype=np.float64)
    values = values[:, None] if values.ndim == 1 else values
    est = design.estimates(_reduce_columns(values), seed, n_draws)
    return jackknife_trace_variance(est)


def mc_mean(values, design: SamplingDesign, n_draws: int, seed=0):
    """Monte Carlo mean of the weighted aggregate and per-coordinate standard errors."""
    values = np.asarray(values, dtype=np.float64)
    values = values[:, None] if values.ndim == 1 else values
    est = design.estimates(values, seed, n_draws)
    return est.mean(axis=0), est.std(axis=0, ddof=1) / math.sqrt(n_draws)


def monte_carlo_variance(pop: Population, scheme, m: int, n_draws: int = 100_000, seed=0):
    return mc_trace_variance(pop.updates, design_for(pop, scheme, m), n_draws, seed)


# ---------------------------------------------------------------------------
# Scheme comparison
# ---------------------------------------------------------------------------


@dataclass
class VarianceReport:
    v_rand: float
    v_cluster: float
    v_cludiv: float
    v_hybrid: float
    se_rand: float
    se_cluster: float
    se_cludiv: float
    se_hybrid: float
    between_term: float
    variability_term: float
    importance_term: float
    m: int
    n_clients: int
    allocation_plain: list = field(default_factory=list)
    allocation_neyman: list = field(default_factory=list)
    method: str = "monte_carlo"
    n_draws: int = 0
    gap_terms_are_approximate: bool = True

    def variances(self) -> dict:
        return {k: getattr(self, f"v_{k}") for k in SCHEME_ORDER}

    def std_errors(self) -> dict:
        return {k: getattr(self, f"se_{k}") for k in SCHEME_ORDER}

    def separations(self) -> dict:
        """Gap between consecutive schemes in units of their combined standard error."""
        v, se = self.variances(), self.std_errors()
        out = {}
        for lo, hi in zip(SCHEME_ORDER[:-1], SCHEME_ORDER[1:]):
            scale = math.hypot(se[lo], se[hi])
            diff = v[hi] - v[lo]
            out[f"{lo}<{hi}"] = math.inf if scale == 0 and diff > 0 else (diff / scale if scale else 0.0)
        return out

    def ordering_holds(self, n_sigma: float = 3.0) -> dict:
        return {k: s >= n_sigma for k, s in self.separations().items()}

    def all_agree(self, n_sigma: float = 3.0) -> bool:
        v, se = self.variances(), self.std_errors()
        for a, b in itertools.combinations(SCHEME_ORDER, 2):
            if abs(v[a] - v[b]) > n_sigma * math.hypot(se[a], se[b]):
                return False
        return True

    def to_dict(self) -> dict:
        out = asdict(self)
        out["separations"] = self.separations()
        out["ordering_3se"] = self.ordering_holds()
        return out


def gap_terms(pop: Population, m: int):
    """Large-population approximations of the three variance gaps.

    Returns ``(between, variability, importance)``:

    * ``sum N_h ||W_h - W||^2 / (m N)``           rand minus plain-cluster
    * ``sum N_h (S_h - S_bar)^2 / (m N)``         plain minus re-allocated
    * ``sum Q_h^2 gap_h / m_h``                   re-allocated minus hybrid,
      with ``gap_h`` the per-draw importance gap of stratum h and ``m_h`` the
      re-allocated draws (strata with no draws skipped).
    """
    strata = pop.strata()
    n = pop.n
    grand = pop.updates.mean(axis=0)
    sizes = np.array([s.size for s in strata], dtype=np.float64)
    stds = stratum_std(pop)
    between = sum(s.size * float(((pop.updates[s].mean(axis=0) - grand) ** 2).sum()) for s in strata if s.size)
    s_bar = float(sizes @ stds / n)
    variability = float(sizes @ (stds - s_bar) ** 2)
    alloc = design_for(pop, Scheme.CLUSTER_NEYMAN, m).allocation
    importance = 0.0
    for members, m_h in zip(strata, alloc):
        if m_h == 0 or not pop.norms[members].sum() > 0:
            continue
        importance += (members.size / n) ** 2 * importance_trace_gap(pop.norms[members]) / m_h
    return between / (m * n), variability / (m * n), importance


def scheme_variance_report(pop: Population, m: int, n_draws: int = 100_000, seed=0,
                    clustering=None, norms=None) -> VarianceReport:
    """Monte Carlo variances of rand/cluster/cludiv/hybrid plus the approximate gap terms."""
    pop = _with_clusters(pop, clustering)
    if norms is not None:
        pop = Population(pop.updates, pop.cluster_of, norms, pop.weights)
    if pop.cluster_of is None:
        raise ValueError("population needs cluster assignments")
    root = np.random.SeedSequence(int(seed) if not isinstance(seed, np.random.SeedSequence) else seed.entropy)
    children = root.spawn(len(SCHEME_ORDER))
    v, se = {}, {}
    for name, child in zip(SCHEME_ORDER, children):
        v[name], se[name] = monte_carlo_variance(pop, name, m, n_draws, np.random.default_rng(child))
    between, variability, importance = gap_terms(pop, m)
    return VarianceReport(
        v_rand=v["rand"], v_cluster=v["cluster"], v_cludiv=v["cludiv"], v_hybrid=v["hybrid"],
        se_rand=se["rand"], se_cluster=se["cluster"], se_cludiv=se["cludiv"], se_hybrid=se["hybrid"],
        between_term=between, variability_term=variability, importance_term=importance,
        m=m, n_clients=pop.n,
        allocation_plain=design_for(pop, "cluster", m).allocation.tolist(),
        allocation_neyman=design_for(pop, "cludiv", m).allocation.tolist(),
        method=f"monte_carlo(n_draws={n_draws}, std_err=jackknife)", n_draws=n_draws,
    )


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

STANDARD_SIZES = (40, 50, 50, 60)
STANDARD_MAGNITUDE = (3.0, 4.0, 5.0, 6.0)
STANDARD_SPREAD = (0.2, 0.6, 1.2, 2.4)


def standard_fixture(seed: int = 2024, dim: int = 8, noise: float = 0.05) -> Population:
    """Four well-separated blobs of updates, N = 200.

    Cluster h points along its own unit direction with magnitudes uniform on
    ``magnitude_h +- spread_h``, plus small isotropic noise, so clusters
    differ in mean, spread and update norm.
    """
    rng = np.random.default_rng(seed)
    directions = np.linalg.qr(rng.standard_normal((dim, dim)))[0][:, :len(STANDARD_SIZES)].T
    rows, labels = [], []
    for h, (size, mag, spread) in enumerate(zip(STANDARD_SIZES, STANDARD_MAGNITUDE, STANDARD_SPREAD)):
        scale = rng.uniform(mag - spread, mag + spread, size)
        rows.append(scale[:, None] * directions[h] + noise * rng.standard_normal((size, dim)))
        labels.append(np.full(size, h))
    return Population(np.concatenate(rows), np.concatenate(labels))


def homogeneous_fixture(seed: int = 7, cluster_size: int = 5000, n_clusters: int = 4, dim: int = 8) -> Population:
    """Identical copies of one point cloud on the unit sphere, one copy per cluster.

    Cluster means, spreads and update norms are all equal.
    """
    rng = np.random.default_rng(seed)
    cloud = rng.standard_normal((cluster_size, dim))
    cloud /= np.linalg.norm(cloud, axis=1, keepdims=True)
    updates = np.tile(cloud, (n_clusters, 1))
    labels = np.repeat(np.arange(n_clusters), cluster_size)
    return Population(updates, labels)


theorem1_report = scheme_variance_report  # name required by the published interface
