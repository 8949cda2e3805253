"""SplitMix64 pseudo-random stream.

Used for weight init, shuffling, augmentation and synthetic data so that runs
are reproducible bit-for-bit from a single 64-bit seed, independent of
numpy's generator implementations.
"""
from __future__ import annotations

import math

import numpy as np

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK
    z = ((z ^ (z >> 27)) * _M2) & MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK
        return _mix(self.state)

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as a uint64 array (same values as n calls to next_u64)."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + GAMMA * n) & MASK
        return _mix_array(states)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller (cos and sin halves interleaved)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()[:n]

    def randbelow(self, n: int) -> int:
        return (self.next_u64() * n) >> 64

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def split(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())


def prng_split(seed: int) -> SplitMix64:
    return SplitMix64(seed)
