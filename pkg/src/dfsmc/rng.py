"""Seed hierarchy: every random stream is keyed by (seed, purpose, *keys)."""

import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def seed_sequence(seed: int, purpose: str, *keys: int) -> np.random.SeedSequence:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_key(purpose)]
    entropy.extend(int(k) for k in keys)
    return np.random.SeedSequence(entropy)


def rng_for(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for one purpose; streams never overlap by construction."""
    return np.random.default_rng(seed_sequence(seed, purpose, *keys))
