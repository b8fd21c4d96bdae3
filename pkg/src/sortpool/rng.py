"""SplitMix64 pseudo-random generator.

The algorithm is fixed by its constants so any implementation reproduces the
same stream from the same 64-bit seed:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

(all arithmetic modulo 2**64). Uniform doubles use the top 53 bits,
``(z >> 11) * 2**-53``. Permutations are a Fisher-Yates shuffle drawing
``j = floor(u * (i + 1))`` for ``i = n-1 .. 1``.
"""
from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK
    z = ((z ^ (z >> 27)) * MIX2) & MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministically derive an independent stream seed from ``seed`` and integer tags."""
    s = seed & MASK
    for t in tags:
        s = mix64((s + GAMMA * (int(t) + 1)) & MASK)
    return s


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK
        return mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """``n`` consecutive outputs, identical to ``n`` calls of ``next_u64``."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK
        return z

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal_array(self, n: int) -> np.ndarray:
        # Box-Muller on pairs of uniforms; 1 - u keeps the log argument positive
        u = self.uniform_array(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` draws in ``[0, high)`` via ``floor(u * high)``."""
        return np.floor(self.uniform_array(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform_array(n - 1)
        bounds = np.arange(n, 1, -1, dtype=np.float64)
        js = np.floor(u * bounds).astype(np.int64).tolist()
        p = perm.tolist()
        for i, j in zip(range(n - 1, 0, -1), js):
            p[i], p[j] = p[j], p[i]
        return np.asarray(p, dtype=np.int64)
