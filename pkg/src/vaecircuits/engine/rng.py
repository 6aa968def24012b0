"""Seeded random streams.

Uniforms come from the Philox-4x64 counter-based generator keyed by
(seed, stream id), which is platform independent. Normals use Box-Muller
over that uniform stream; permutations are argsorts of uniform keys.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


class SeededRNG:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK
        self.stream = int(stream) & _MASK
        self._bits = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self._gen = np.random.Generator(self._bits)

    def child(self, stream: int) -> "SeededRNG":
        """Independent stream sharing this seed."""
        return SeededRNG(self.seed, (self.stream * 1_000_003 + stream + 1) & _MASK)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return float(out[0]) if size is None else out.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform ints in [0, high)."""
        u = np.asarray(self._gen.random(size))
        out = np.minimum((u * high).astype(np.int64), high - 1)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self._gen.random(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n}")
        return self.permutation(n)[:k]
