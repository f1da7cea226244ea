"""Deterministic, collision-free RNG substreams.

Every random draw in the package flows through :func:`substream` so that
(a) identical configs give bit-identical results and (b) adding a new
consumer (an extra origin, a later step, another evaluation batch) never
perturbs the draws of existing consumers. Substreams are keyed by small
integer tuples via ``numpy.random.SeedSequence`` spawn keys, which are
stable across platforms and numpy versions.
"""

from __future__ import annotations

import numpy as np

# Purpose codes used as the leading spawn-key component.
TRAIN = 0
EVAL = 1
NORM = 2
INIT = 3
SHUFFLE = 4
NOISE = 5


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...), e.g. (seed, TRAIN, origin, step)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))
