"""Deterministic PRNG substreams.

All randomness in the package flows from one base seed through named
substreams, so any component (data generation, weight init, a single
attack) can be reproduced in isolation. Streams are derived by mixing
the base seed with the stream path via splitmix64, which gives
well-separated 64-bit seeds for numpy's PCG64.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; also used as the weight-file integrity digest."""
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def derive_seed(base_seed: int, *path: int | str) -> int:
    """Mix a base seed with a path of stream names / indices into a 64-bit seed."""
    h = _splitmix64(base_seed & _MASK64)
    for part in path:
        if isinstance(part, str):
            h ^= fnv1a64(part.encode("utf-8"))
        else:
            h ^= part & _MASK64
        h = _splitmix64(h)
    return h


def substream(base_seed: int, *path: int | str) -> np.random.Generator:
    """Seeded generator for the named substream of ``base_seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed(base_seed, *path)))
