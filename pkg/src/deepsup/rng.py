"""Seeded random streams.

Every run has a single root seed. Independent streams are derived per purpose
(and optionally per index) through ``numpy.random.SeedSequence`` spawn keys and
fed to the counter-based Philox bit generator, so a stream never depends on how
many numbers another stream has consumed.
"""

from __future__ import annotations

import numpy as np

# Purpose tags used as the first spawn-key element.
INIT = 1
DROPOUT = 2
DATA = 3
SHUFFLE = 4
MODELS = 5
SPLIT = 6


def stream(seed: int, purpose: int, *index: int) -> np.random.Generator:
    """Return the generator for ``(seed, purpose, *index)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=(purpose, *index))
    return np.random.Generator(np.random.Philox(ss))
