"""
Seeded randomness.

All stochastic steps (splits, bootstraps, feature subsampling, weight
init, minibatch order) draw from numpy's PCG64 bit generator seeded
through SeedSequence. Both algorithms are documented by numpy, so a
reimplementation can reproduce every stream from (base seed, keys).
"""

import numpy as np


def _sequence(seed: int, keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit child seed for the unit identified by `keys` (trial, tree, file...)."""
    return int(_sequence(seed, keys).generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_sequence(seed, keys)))
