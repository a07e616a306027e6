"""Counter-based SplitMix64 random streams.

Every stochastic routine in the package draws from ``Stream(seed, index)``,
one stream per sample index, so sample ``n`` can be generated without
generating samples ``0..n-1`` first. That is what keeps results independent
of how the work is split across threads.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_STREAM_SALT = 0xD1B54A32D192ED03


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class Stream:
    """Deterministic random stream keyed by ``(seed, index)``.

    Draws advance an internal counter, so two streams with the same key
    produce identical sequences of calls and values.
    """

    def __init__(self, seed: int, index: int = 0):
        if seed < 0 or index < 0:
            raise ValueError("seed and index must be non-negative")
        self.seed = int(seed) & _MASK
        self.index = int(index) & _MASK
        self._base = mix64(self.seed ^ mix64((self.index + _STREAM_SALT) & _MASK))
        self._counter = 0

    def bits(self, n: int) -> np.ndarray:
        """Return ``n`` raw 64-bit outputs."""
        k = np.arange(self._counter + 1, self._counter + 1 + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self._base) + k * np.uint64(_GAMMA)
            return _mix64_array(states)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform doubles on ``[low, high)`` with 53 random bits each."""
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], log-safe
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers uniform on the closed range ``[low, high]``."""
        span = high - low + 1
        if span <= 0:
            raise ValueError("empty integer range")
        return low + np.floor(self.uniform(n) * span).astype(np.int64)

    def bernoulli(self, p: float, n: int) -> np.ndarray:
        return (self.uniform(n) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniform keys; stable so equal keys (never in practice) stay ordered
        return np.argsort(self.uniform(n), kind="stable")
