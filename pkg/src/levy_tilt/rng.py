"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, purpose, *counters)``.  Two streams with different keys
are independent, and a stream can be rebuilt at any time from its key alone,
which is what lets the training code regenerate Monte Carlo samples instead of
storing them.
"""
from __future__ import annotations

import enum

import numpy as np


class Purpose(enum.IntEnum):
    GT_COUNT = 1
    GT_MAGNITUDE = 2
    GT_SIGN = 3
    KL_SAMPLES = 10
    JUMP_COUNT = 11
    PROPOSAL = 12
    ACCEPT = 13
    NORMAL = 14
    OBS_NOISE = 20
    INIT = 30
    FORECAST = 40
    MISC = 99


def stream(seed: int, purpose: int, *counters: int) -> np.random.Generator:
    """Return the generator keyed by ``(seed, purpose, *counters)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), *map(int, counters)))
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))
