"""Portable 64-bit LCG used for all weight/dataset randomness.

state <- state * 6364136223846793005 + 1442695040888963407 (mod 2^64)

Every language binding of the file formats can replay the exact stream, so
encoder weights and generated datasets are reproducible from the seed alone.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1
MULTIPLIER = 6364136223846793005
INCREMENT = 1442695040888963407


class Lcg:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state * MULTIPLIER + INCREMENT) & MASK64
        return self.state

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform_in(self, low: float, high: float) -> float:
        return low + (high - low) * self.uniform()

    def gaussian(self) -> float:
        """Standard normal via Box-Muller (one value per pair, no caching)."""
        u1 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def fill_uniform(self, n: int, low: float, high: float) -> list[float]:
        return [self.uniform_in(low, high) for _ in range(n)]

    def fill_gaussian(self, n: int) -> list[float]:
        return [self.gaussian() for _ in range(n)]
