"""Keyed, platform-stable random streams (PCG64 seeded through SeedSequence)."""

from __future__ import annotations

import zlib

import numpy as np

# stream tags keep e.g. generation and epoch shuffling independent
GENERATE = 1
SHUFFLE = 2
SIMULATE = 3


def keyed_rng(*keys: int | str) -> np.random.Generator:
    """Generator determined only by ``keys`` (ints, or strings hashed with crc32)."""
    words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    if any(w < 0 for w in words):
        words = [w & 0xFFFFFFFFFFFFFFFF for w in words]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
