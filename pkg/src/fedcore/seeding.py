"""Named sub-seeds: every random stream derives from one experiment seed."""

import zlib

import numpy as np

__all__ = ["sub_seed", "sub_rng"]


def sub_seed(seed, name, *keys):
    """Deterministic 63-bit seed for stream ``name`` under ``seed`` and integer ``keys``."""
    entropy = [int(seed) % (1 << 64), zlib.crc32(name.encode())] + [int(k) % (1 << 64) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def sub_rng(seed, name, *keys):
    return np.random.default_rng(sub_seed(seed, name, *keys))
