"""Deterministic seed derivation for independent RNG streams.

Every stream in the simulator is keyed by the experiment seed plus a tag
path (strings and non-negative ints), so results never depend on scheduling
order or on Python's salted hash().
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError(f"seed key parts must be non-negative, got {part}")
    return value


def derive_seed(base: int, *key) -> np.random.SeedSequence:
    """A SeedSequence for the stream identified by (base, *key)."""
    return np.random.SeedSequence(int(base), spawn_key=tuple(_key_part(p) for p in key))


def derive_rng(base: int, *key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *key))
