"""Seeded, splittable random source threaded through every stochastic step."""
from __future__ import annotations

import numpy as np


class SeededRng:
    """Thin wrapper over a PCG64 stream.

    No module in this package touches a global RNG; anything random takes a
    ``SeededRng`` (or an int seed that is turned into one).
    """

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, key: int) -> "SeededRng":
        """Independent child stream, a pure function of (seed, key)."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return SeededRng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self._gen.uniform(lo, hi, size)

    def integers(self, lo, hi=None, size=None):
        return self._gen.integers(lo, hi, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def as_rng(rng) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    if rng is None:
        return SeededRng(0)
    return SeededRng(int(rng))
