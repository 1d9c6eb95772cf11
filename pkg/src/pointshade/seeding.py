"""Deterministic seed derivation for independent random streams.

Every stochastic stage takes an explicit integer seed.  Sub-streams (one per
scene, per point, per purpose) are derived here so that results never depend
on call order or thread schedule.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & _MASK64


def derive_seed(seed: int, *keys) -> int:
    """Mix ``seed`` with context keys into a new 64-bit seed.

    Keys may be ints or short strings (e.g. ``("scene", 3, "ao")``).
    """
    entropy = [int(seed) & _MASK64] + [_key_to_int(k) for k in keys]
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, np.uint64)[0])


def spawn_rng(seed: int, *keys) -> np.random.Generator:
    """A numpy Generator seeded from ``derive_seed(seed, *keys)``."""
    entropy = [int(seed) & _MASK64] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
