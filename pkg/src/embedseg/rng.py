"""Deterministic counter-based random streams.

Philox is counter-based and splittable: independent streams are derived from
(seed, key...) without shared state, so per-frame or per-scene work reproduces
bit-identically regardless of execution order or thread count.
"""

import numpy as np


def philox(seed, *key):
    """Generator on an independent Philox stream identified by (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *key):
    """A plain integer seed derived deterministically from (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])
