"""Counter-based seed derivation.

Every random stream in the package is derived from a master integer seed and a
tuple of keys through :class:`numpy.random.SeedSequence` spawn keys. String keys
are mapped to integers with CRC-32, so the stream for a given key path never
depends on how many other streams exist or on the order they are consumed.
"""

from __future__ import annotations

import zlib

import numpy as np

Key = int | str

_MASK63 = (1 << 63) - 1


def _key_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"seed keys must be nonnegative, got {key}")
    return int(key)


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))


def derive_seed(seed: int, *keys: Key) -> int:
    """Child seed for the key path ``keys`` under ``seed`` (a 63-bit integer)."""
    state = seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)
    return int(state[0]) & _MASK63


def rng_for(seed: int, *keys: Key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))
