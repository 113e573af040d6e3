import hashlib
from typing import Union

import numpy as np

MASK64 = (1 << 64) - 1

Key = Union[int, str]


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer, the mixing function behind every derived seed."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        # str hashes are salted per process; use a stable digest instead
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
    return int(key) & MASK64


def derive_seed(master: int, *keys: Key) -> int:
    """Folds keys into the master seed: h <- splitmix64(h ^ key) for each key in order."""
    h = splitmix64(int(master) & MASK64)
    for key in keys:
        h = splitmix64(h ^ _key_to_int(key))
    return h


def rng_for(master: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
