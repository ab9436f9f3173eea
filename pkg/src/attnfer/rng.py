"""Counter-based splitmix64 streams.

Every random draw in the package (weight init, shuffling, synthetic data) comes
from here so results are reproducible bit for bit regardless of the numpy
version.  A stream is identified by ``(seed, key)``; value ``i`` of a stream is
``mix64(origin + (i + 1) * GOLDEN)`` where ``origin`` mixes seed and key.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_KEY_SALT = 0x632BE59BD9B4E019
_MASK = (1 << 64) - 1


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(z):
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class Stream:
    """Deterministic stream of 64-bit values keyed by ``(seed, key)``."""

    def __init__(self, seed, key=0):
        self.origin = _mix_int((int(seed) & _MASK) ^ _mix_int(int(key) + _KEY_SALT))
        self.pos = 0

    def bits(self, n):
        with np.errstate(over="ignore"):
            k = np.arange(self.pos + 1, self.pos + n + 1, dtype=np.uint64)
            out = _mix64(np.uint64(self.origin) + k * GOLDEN)
        self.pos += n
        return out

    def uniform(self, n):
        """``n`` floats in [0, 1) with 53 random bits each."""
        return (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n):
        """``n`` standard normals via Box-Muller."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n]

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n, k):
        """``k`` distinct indices from ``range(n)`` (all of them when ``k >= n``)."""
        perm = self.permutation(n)
        return np.sort(perm[: min(k, n)])
