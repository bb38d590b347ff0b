"""Per-purpose random streams derived from a single master seed.

Every random decision in a run is drawn from a generator obtained by
``derive_rng(master_seed, purpose, *indices)``.  The derivation is a numpy
``SeedSequence`` keyed by ``(purpose_code, *indices)``, so two streams with
different purposes or indices are statistically independent and adding a new
consumer never perturbs the existing ones.

Purpose codes (stable, part of the reproducibility contract):

=============  ====  ===========================================
purpose        code  indices
=============  ====  ===========================================
partition      1     ()
init           2     ()
client         3     (round, client_id)
selection      4     (round,)
clustering     5     (round,)
monte_carlo    6     (round,)
compression    7     (round, client_id)
data           8     ()
=============  ====  ===========================================
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "partition": 1,
    "init": 2,
    "client": 3,
    "selection": 4,
    "clustering": 5,
    "monte_carlo": 6,
    "compression": 7,
    "data": 8,
}


def derive_seed(master_seed: int, purpose: str, *indices: int) -> np.random.SeedSequence:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown seed purpose {purpose!r}")
    key = (PURPOSES[purpose],) + tuple(int(i) for i in indices)
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)


def derive_rng(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, purpose, *indices))


def as_rng(seed) -> np.random.Generator:
    """Accept an int, SeedSequence, Generator or None and return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
