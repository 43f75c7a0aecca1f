"""Deterministic 64-bit PRNG used for everything random in this package.

The generator is a splitmix-style counter hash: the k-th output depends
only on ``seed + k * GAMMA`` pushed through a fixed avalanche mix, so a
whole block of draws can be produced vectorized while staying identical
to one-at-a-time generation.  The constants below fully define the
stream; any implementation using them reproduces it bit for bit.

    GAMMA = 0x9E3779B97F4A7C15
    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

Doubles in [0, 1) are the top 53 bits scaled by 2**-53.  Normals use
Box-Muller on consecutive uniform pairs.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


class SplitMix64:
    """Seeded stream of uniforms/normals with an explicit integer state."""

    def __init__(self, seed: int):
        self.state = _U64(seed & 0xFFFFFFFFFFFFFFFF)

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            ks = self.state + np.arange(1, n + 1, dtype=np.uint64) * GAMMA
            self.state = self.state + _U64(n) * GAMMA
            return _mix(ks)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self, size=None) -> np.ndarray | float:
        """Doubles in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * 2.0**-53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray | float:
        """Standard normals via Box-Muller (two uniforms per draw)."""
        n = 1 if size is None else int(np.prod(size))
        u1 = 1.0 - self.uniform(n)  # (0, 1]: keeps the log finite
        u2 = self.uniform(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2) * std
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integer(self, n: int) -> int:
        """Uniform draw from range(n) via floor(u * n)."""
        return min(int(self.uniform() * n), n - 1)

    def state_words(self) -> tuple[int, int]:
        """State split into two 32-bit halves (checkpoint friendly)."""
        s = int(self.state)
        return s >> 32, s & 0xFFFFFFFF

    @classmethod
    def from_state_words(cls, hi: int, lo: int) -> "SplitMix64":
        rng = cls(0)
        rng.state = _U64((int(hi) << 32) | int(lo))
        return rng
