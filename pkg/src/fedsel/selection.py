"""Client-selection schemes and stratum allocation.

Every scheme is expressed as a :class:`SamplingDesign`: a list of strata, each
with a number of draws and either uniform without-replacement sampling or a
fixed per-draw distribution sampled with replacement.  A design draws single
:class:`SelectionPlan` objects for training rounds and vectorised batches for
Monte Carlo variance estimates, so both paths share one sampler.

Aggregation weights are inverse-probability weights, which make
``sum(agg_weight * w_chosen)`` an unbiased estimator of ``sum_k omega_k w_k``:

* uniform without replacement in a stratum of size ``N_h`` with ``m_h`` draws:
  ``omega_k * N_h / m_h`` (for the single-stratum random scheme this is the
  familiar ``(N / m) * omega_k``);
* ``m_h`` draws with replacement from probabilities ``p``:
  ``omega_k / (m_h * p_k)`` per occurrence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .seeding import as_rng

logger = logging.getLogger(__name__)


class Scheme(str, Enum):
    RANDOM = "random"
    IMPORTANCE = "importance"
    CLUSTER_PLAIN = "cluster_plain"
    CLUSTER_NEYMAN = "cluster_neyman"
    HYBRID = "hybrid"

    @property
    def clustered(self) -> bool:
        return self in (Scheme.CLUSTER_PLAIN, Scheme.CLUSTER_NEYMAN, Scheme.HYBRID)

    @property
    def uses_norms(self) -> bool:
        return self in (Scheme.IMPORTANCE, Scheme.HYBRID)


@dataclass(eq=False)
class SelectionPlan:
    chosen: np.ndarray
    inclusion_prob: np.ndarray
    agg_weight: np.ndarray
    scheme: str
    allocation: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.chosen.shape[0]


@dataclass(eq=False)
class Stratum:
    members: np.ndarray
    n_draws: int
    probs: np.ndarray | None = None  # None: uniform, without replacement

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def with_replacement(self) -> bool:
        return self.probs is not None

    def draw_coefficients(self, weights: np.ndarray) -> np.ndarray:
        """Per-member aggregation weight applied each time the member is drawn."""
        w = weights[self.members]
        if self.n_draws == 0:
            return np.zeros_like(w)
        if self.probs is None:
            return w * (self.size / self.n_draws)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = w / (self.n_draws * self.probs)
        return np.where(self.probs > 0, coef, 0.0)

    def inclusion_probabilities(self) -> np.ndarray:
        if self.probs is None:
            return np.full(self.size, self.n_draws / self.size)
        return 1.0 - (1.0 - self.probs) ** self.n_draws


def _draw_without_replacement(rng: np.random.Generator, pop_size: int, k: int, n: int) -> np.ndarray:
    """``n`` independent uniform k-subsets of ``range(pop_size)``, one per row."""
    if k == pop_size:
        return np.tile(np.arange(pop_size), (n, 1))
    if k == 0:
        return np.empty((n, 0), dtype=np.int64)
    accept = math.prod(1.0 - i / pop_size for i in range(k))
    if accept >= 0.5:
        # rejection on ordered tuples: uniform over tuples of distinct entries
        out = rng.integers(0, pop_size, size=(n, k))
        bad = np.flatnonzero((np.diff(np.sort(out, axis=1), axis=1) == 0).any(axis=1))
        while bad.size:
            redraw = rng.integers(0, pop_size, size=(bad.size, k))
            out[bad] = redraw
            dup = (np.diff(np.sort(redraw, axis=1), axis=1) == 0).any(axis=1)
            bad = bad[dup]
        return out
    rows = max(1, 4_000_000 // pop_size)
    parts = []
    for start in range(0, n, rows):
        keys = rng.random((min(rows, n - start), pop_size))
        parts.append(np.argpartition(keys, k - 1, axis=1)[:, :k])
    return np.concatenate(parts)


@dataclass(eq=False)
class SamplingDesign:
    n_clients: int
    weights: np.ndarray
    strata: list[Stratum]
    scheme: str
    allocation: np.ndarray | None = field(default=None)

    @property
    def m(self) -> int:
        return sum(s.n_draws for s in self.strata)

    def inclusion_probabilities(self) -> np.ndarray:
        pi = np.zeros(self.n_clients)
        for s in self.strata:
            pi[s.members] = s.inclusion_probabilities()
        return pi

    def missing_mass(self) -> float:
        """Total weight of strata that receive no draws (these make the design biased)."""
        return float(sum(self.weights[s.members].sum() for s in self.strata if s.n_draws == 0))

    def sample_batch(self, seed, n_draws: int):
        """Draw ``n_draws`` independent selections.

        Returns ``(ids, coef)``, both ``(n_draws, m)``: chosen client ids and
        the aggregation weight of each occurrence.
        """
        rng = as_rng(seed)
        ids, coefs = [], []
        for s in self.strata:
            if s.n_draws == 0:
                continue
            if s.probs is None:
                local = _draw_without_replacement(rng, s.size, s.n_draws, n_draws)
            else:
                local = rng.choice(s.size, size=(n_draws, s.n_draws), p=s.probs)
            ids.append(s.members[local])
            coefs.append(s.draw_coefficients(self.weights)[local])
        if not ids:
            return np.empty((n_draws, 0), dtype=np.int64), np.empty((n_draws, 0))
        return np.concatenate(ids, axis=1), np.concatenate(coefs, axis=1)

    def sample(self, seed) -> SelectionPlan:
        ids, coef = self.sample_batch(seed, 1)
        pi = self.inclusion_probabilities()
        chosen = ids[0]
        return SelectionPlan(chosen, pi[chosen], coef[0], self.scheme, self.allocation)

    def estimates(self, values: np.ndarray, seed, n_draws: int, chunk: int = 20_000) -> np.ndarray:
        """Per-draw weighted aggregates ``sum_j coef_j * values[id_j]`` as an ``(n_draws, dim)`` array."""
        rng = as_rng(seed)
        values = np.asarray(values, dtype=np.float64)
        out = np.empty((n_draws, values.shape[1]))
        for start in range(0, n_draws, chunk):
            n = min(chunk, n_draws - start)
            ids, coef = self.sample_batch(rng, n)
            out[start:start + n] = np.einsum("nm,nmd->nd", coef, values[ids])
        return out


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------


def _water_fill(sizes: np.ndarray, weights: np.ndarray, total: float):
    """Continuous allocation proportional to ``weights`` with caps ``sizes``."""
    x = np.zeros(sizes.shape[0])
    free = weights > 0
    remaining = float(total)
    while remaining > 1e-12 and free.any():
        share = remaining * weights[free] / weights[free].sum()
        idx = np.flatnonzero(free)
        over = share >= sizes[idx]
        if not over.any():
            x[idx] = share
            remaining = 0.0
            break
        capped = idx[over]
        x[capped] = sizes[capped]
        remaining -= sizes[capped].sum()
        free[capped] = False
    return x, remaining


def _round_largest_remainder(x: np.ndarray, m: int) -> np.ndarray:
    x = np.round(x, 9)  # absorb representation noise so scaled inputs round identically
    base = np.floor(x).astype(np.int64)
    short = m - int(base.sum())
    if short > 0:
        rem = x - base
        order = np.lexsort((np.arange(x.shape[0]), -rem))
        base[order[:short]] += 1
    return base


def _allocate(sizes, weights, m: int) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if m < 0 or m > sizes.sum():
        raise ValueError(f"cannot allocate m={m} draws over {int(sizes.sum())} clients")
    if np.any(weights < 0):
        raise ValueError("allocation weights must be non-negative")
    x, remaining = _water_fill(sizes, weights, m)
    if remaining > 1e-12:
        # clusters with zero weight absorb the excess in proportion to their size
        zero = weights <= 0
        extra, _ = _water_fill(np.where(zero, sizes, 0.0), np.where(zero, sizes, 0.0), remaining)
        x = x + extra
    return _round_largest_remainder(x, m)


def allocate_plain(sizes, m: int) -> np.ndarray:
    """Draws per cluster proportional to cluster size (largest-remainder rounding)."""
    return _allocate(sizes, np.asarray(sizes, dtype=np.float64), m)


def allocate_neyman(sizes, stats, m: int) -> np.ndarray:
    """Draws per cluster proportional to ``N_h * S_h``, capped at ``N_h``.

    Excess from capped clusters is redistributed over the rest in proportion
    to their ``N_h * S_h``; if that leaves draws unplaced (only zero-``S_h``
    clusters have room) they go to those clusters by size.  All ``S_h = 0``
    reduces to :func:`allocate_plain`.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    stats = np.asarray(stats, dtype=np.float64)
    if stats.shape != sizes.shape:
        raise ValueError("sizes and stats must have the same length")
    return _allocate(sizes, sizes * stats, m)


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------


def _weights(n: int, weights) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"expected {n} client weights, got shape {w.shape}")
    return w


def _check_m(n: int, m: int):
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= N={n}, got m={m}")


def _norm_probs(norms: np.ndarray) -> np.ndarray | None:
    total = norms.sum()
    if not total > 0:
        return None
    return norms / total


def random_design(n_clients: int, m: int, weights=None) -> SamplingDesign:
    _check_m(n_clients, m)
    strata = [Stratum(np.arange(n_clients), m)]
    return SamplingDesign(n_clients, _weights(n_clients, weights), strata, Scheme.RANDOM.value)


def importance_design(norms, m: int, weights=None) -> SamplingDesign:
    norms = np.asarray(norms, dtype=np.float64)
    n = norms.shape[0]
    _check_m(n, m)
    if np.any(norms < 0):
        raise ValueError("norms must be non-negative")
    probs = _norm_probs(norms)
    if probs is None:
        raise ValueError("importance sampling needs at least one non-zero norm")
    return SamplingDesign(n, _weights(n, weights), [Stratum(np.arange(n), m, probs)], Scheme.IMPORTANCE.value)


def _strata_of(clustering) -> list[np.ndarray]:
    if hasattr(clustering, "strata"):
        return clustering.strata()
    return [np.asarray(s, dtype=np.int64) for s in clustering]


def cluster_design(clustering, m: int, allocation_mode: str = "plain", stats=None,
                   weights=None) -> SamplingDesign:
    strata = _strata_of(clustering)
    n = sum(s.size for s in strata)
    _check_m(n, m)
    sizes = np.array([s.size for s in strata])
    if allocation_mode == "plain":
        alloc = allocate_plain(sizes, m)
        scheme = Scheme.CLUSTER_PLAIN
    elif allocation_mode == "neyman":
        if stats is None:
            raise ValueError("neyman allocation needs per-cluster stats")
        alloc = allocate_neyman(sizes, stats, m)
        scheme = Scheme.CLUSTER_NEYMAN
    else:
        raise ValueError(f"unknown allocation mode {allocation_mode!r}")
    design_strata = [Stratum(members, int(k)) for members, k in zip(strata, alloc)]
    return SamplingDesign(n, _weights(n, weights), design_strata, scheme.value, alloc)


def hybrid_design(clustering, stats, norms, m: int, weights=None) -> SamplingDesign:
    strata = _strata_of(clustering)
    norms = np.asarray(norms, dtype=np.float64)
    n = norms.shape[0]
    if sum(s.size for s in strata) != n:
        raise ValueError("clustering and norms disagree on the number of clients")
    _check_m(n, m)
    if np.any(norms < 0):
        raise ValueError("norms must be non-negative")
    sizes = np.array([s.size for s in strata])
    alloc = allocate_neyman(sizes, stats, m)
    design_strata = []
    for h, (members, k) in enumerate(zip(strata, alloc)):
        probs = _norm_probs(norms[members])
        if probs is None:
            if k > 0:
                logger.info("cluster %d has all-zero norms; sampling it uniformly", h)
            probs = np.full(members.size, 1.0 / members.size)
        design_strata.append(Stratum(members, int(k), probs))
    return SamplingDesign(n, _weights(n, weights), design_strata, Scheme.HYBRID.value, alloc)


def make_design(scheme, *, n_clients: int, m: int, clustering=None, stats=None, norms=None,
                weights=None) -> SamplingDesign:
    scheme = Scheme(scheme)
    if scheme is Scheme.RANDOM:
        return random_design(n_clients, m, weights)
    if scheme is Scheme.IMPORTANCE:
        return importance_design(norms, m, weights)
    if clustering is None:
        raise ValueError(f"scheme {scheme.value} needs a clustering")
    if scheme is Scheme.CLUSTER_PLAIN:
        return cluster_design(clustering, m, "plain", weights=weights)
    if scheme is Scheme.CLUSTER_NEYMAN:
        return cluster_design(clustering, m, "neyman", stats, weights)
    return hybrid_design(clustering, stats, norms, m, weights)


# ---------------------------------------------------------------------------
# One-shot selection
# ---------------------------------------------------------------------------


def select_random(n_clients: int, m: int, seed=None, weights=None) -> SelectionPlan:
    return random_design(n_clients, m, weights).sample(seed)


def select_importance(norms, m: int, seed=None, weights=None) -> SelectionPlan:
    return importance_design(norms, m, weights).sample(seed)


def select_cluster(clustering, m: int, seed=None, allocation_mode: str = "plain", stats=None,
                   weights=None) -> SelectionPlan:
    return cluster_design(clustering, m, allocation_mode, stats, weights).sample(seed)


def select_hybrid(clustering, stats, norms, m: int, seed=None, weights=None) -> SelectionPlan:
    return hybrid_design(clustering, stats, norms, m, weights).sample(seed)
