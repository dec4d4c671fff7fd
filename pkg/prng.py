"""
SplitMix64 seed derivation.

Every random decision in the pipeline is drawn from a numpy PCG64 generator
whose seed comes from a SplitMix64 stream. SplitMix64 is tiny, has a 64-bit
state that fits in a checkpoint, and mixes structured inputs (seed, epoch,
frame index) into well-spread child seeds.
"""
import zlib
from typing import Union

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 finalizer"""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential SplitMix64 generator; `state` is the whole generator"""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def generator(self) -> np.random.Generator:
        """Fresh numpy generator seeded from the next value of this stream"""
        return np.random.Generator(np.random.PCG64(self.next_u64()))


def derive_seed(seed: int, *parts: Union[int, str]) -> int:
    """Fold labels and indices into a child seed, stateless and order-sensitive"""
    value = mix64(seed + GOLDEN_GAMMA)
    for part in parts:
        if isinstance(part, str):
            part = zlib.crc32(part.encode("utf-8"))
        value = mix64(value ^ ((part + GOLDEN_GAMMA) & MASK64))
    return value


def generator_for(seed: int, *parts: Union[int, str]) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *parts)))
