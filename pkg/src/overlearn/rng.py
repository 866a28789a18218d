"""Deterministic, splittable random streams.

Every randomized stage of the pipeline draws from a Philox generator keyed
by (seed, purpose, *indices). Philox is counter-based, so streams derived
for different keys are independent and any scheduling or parallel order
reproduces identical draws.
"""

from __future__ import annotations

import numpy as np

# Purpose tags keep independently keyed streams from colliding.
VARIATION = 1
SHUFFLE = 2
DROPOUT = 3
RANDOM_LABELS = 4
INIT = 5
COLORIZE = 6
PROBE = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for (seed, *key).

    Same arguments always produce the same stream; distinct keys never
    share state.
    """
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
