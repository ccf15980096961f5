"""Deterministic, platform-stable pseudo-randomness.

Every stochastic choice in the package (weight init, data synthesis, epoch
shuffles) is drawn from a splitmix64 stream.  The stream is counter-based:
draw i is ``mix64(seed + (i + 1) * GOLDEN)``, so a stream is fully determined
by its seed and how many values have been consumed.  All derived quantities
use only IEEE-754 additions, multiplications and square roots, which are
exactly rounded, so identical seeds produce bit-identical output on any
platform.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0 ** -53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


_M = 0xFFFFFFFFFFFFFFFF


def _mix64_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M
    return z ^ (z >> 31)


def derive(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed, giving independent sub-streams."""
    s = seed & _M
    for k in keys:
        s = _mix64_int(((s ^ (k & _M)) + 0x9E3779B97F4A7C15) & _M)
    return s


class SplitMix64:
    """Counter-based splitmix64 stream of uniforms and Gaussian-like noise."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix64(self._seed + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1), 53-bit resolution."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        """Gaussian noise via the 12-uniform (Irwin-Hall) sum.

        Mean 0, variance exactly 1, support [-6, 6].  Chosen over Box-Muller
        because it needs no transcendental libm calls, keeping draws
        bit-identical across platforms.
        """
        u = self.uniform(12 * n).reshape(n, 12)
        return u.sum(axis=1) - 6.0

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = int(self.u64(1)[0])
            if u < limit:
                return u % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx
