"""Counter-based seeded randomness.

A splitmix64 stream indexed by (seed, draw counter): identical seed and call
sequence give a bitwise-identical output stream, and substreams can be derived
cheaply for independent workers. Normals come from Box-Muller so there is no
dependence on any external generator's implementation details.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 1.0 / (1 << 53)


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over a uint64 array."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


class Rng:
    """Deterministic stream of uniforms/normals/ints for one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._count = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        return _mix(np.uint64(self.seed) + idx * _GOLDEN)

    def spawn(self, *ids: int) -> "Rng":
        """Independent substream keyed by (seed, *ids); does not advance self."""
        key = np.array([self.seed], dtype=np.uint64)
        for i in ids:
            salt = np.array([(int(i) + 1) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
            key = _mix(key ^ (salt * _GOLDEN))
        return Rng(int(key[0]))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniforms in [0, 1), float64."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _U53
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normals via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - (self._raw(m) >> np.uint64(11)).astype(np.float64) * _U53  # (0, 1]
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * _U53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = z.astype(dtype, copy=False)
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform ints in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape if shape else (1,))
        out = (low + np.floor(u * (high - low))).astype(np.int64)
        return out if shape else int(out[0])

    def permutation(self, n: int) -> np.ndarray:
        """Uniformly random permutation of range(n)."""
        return np.argsort(self.uniform((n,)), kind="stable").astype(np.int64)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self.uniform(shape if shape else (1,)) < p

    def gumbel(self, shape=()) -> np.ndarray:
        u = self.uniform(shape)
        return -np.log(-np.log(np.maximum(u, 1e-300)))
