"""Named sub-seeds derived from one master seed."""

import zlib

import numpy as np


def derive(seed: int, name: str, *index: int) -> int:
    """Stable 63-bit seed for the stream ``name`` (optionally indexed)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), *(int(i) for i in index)]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def rng(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive(seed, name, *index))
