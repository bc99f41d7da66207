"""Seeded random streams.

All randomness goes through :func:`make_rng`, which keys numpy's Philox4x64
counter-based generator from a 64-bit seed plus a tuple of stream tags.
The key derivation is SplitMix64 over the seed and the tags, so the mapping
from ``(seed, tags)`` to a stream is fixed and independent of call order.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK
    return zlib.crc32(str(tag).encode())


def derive_key(seed: int, *tags) -> int:
    key = _splitmix64(int(seed) & _MASK)
    for tag in tags:
        key = _splitmix64(key ^ _tag_int(tag))
    return key


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Independent generator for ``seed`` and the stream named by ``tags``."""
    key = derive_key(seed, *tags)
    return np.random.Generator(np.random.Philox(key=[key, _splitmix64(key)]))
