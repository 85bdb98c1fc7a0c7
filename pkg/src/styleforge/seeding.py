"""Deterministic RNG derivation.

Every random draw in the package flows from a master seed through
``seed_sequence(master, *keys)`` so that independent subsystems (corpus
generation, pair planning, weight init, augmentation, dropout) get
decorrelated streams that are stable across runs, platforms, and degrees
of parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(key) -> list[int]:
    if isinstance(key, (int, np.integer)):
        return [int(key) & 0xFFFFFFFF, (int(key) >> 32) & 0xFFFFFFFF]
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    raise TypeError(f"seed keys must be int or str, got {type(key).__name__}")


def seed_sequence(*keys) -> np.random.SeedSequence:
    """Build a SeedSequence from a mixed tuple of ints and strings."""
    words: list[int] = []
    for key in keys:
        words.extend(_key_words(key))
    return np.random.SeedSequence(words)


def generator(*keys) -> np.random.Generator:
    """PCG64 generator for the given key path."""
    return np.random.Generator(np.random.PCG64(seed_sequence(*keys)))


def derive_seed(*keys) -> int:
    """Stable 63-bit integer seed, safe to persist in JSON manifests."""
    material = "\x1f".join(str(k) for k in keys).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF
