"""Seeded random number generation and weight initialization.

All arrays in the engine are plain C-contiguous (row major) numpy arrays,
float32 by default with a float64 mode for numerical gradient checks. The
generator is a fixed algorithm (splitmix64) rather than numpy's default so
that a given seed reproduces the exact same draw sequence anywhere.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX_1 = 0xBF58476D1CE4E5B9
_MIX_2 = 0x94D049BB133111EB


class Rng:
    """splitmix64 stream: state advances by a fixed increment per draw.

    Scalar and block draws produce identical sequences, so vectorised
    consumers (dropout masks, init) stay bit-compatible with scalar ones.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX_1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX_2) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def _next_block(self, n: int) -> np.ndarray:
        """n consecutive u64 draws as a vector; advances state by n steps."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + np.uint64(_GAMMA) * steps
        self._state = (self._state + n * _GAMMA) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_2)
        return z ^ (z >> np.uint64(31))

    def random(self, shape=None) -> np.ndarray | float:
        """Uniform float64 draws in [0, 1) (53-bit resolution)."""
        if shape is None:
            return float(self.next_u64() >> 11) * 2.0**-53
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._next_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def below(self, n: int) -> int:
        """Integer in [0, n)."""
        return min(int(self.random() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n), driven by this stream."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def uniform_init(shape, lo: float, hi: float, rng: Rng, dtype=np.float32) -> np.ndarray:
    """I.i.d. uniform draws on [lo, hi) with the given shape."""
    if lo > hi:
        raise ValueError(f"uniform_init: lo={lo} exceeds hi={hi}")
    u = rng.random(shape)
    return (lo + (hi - lo) * u).astype(dtype)


def glorot_uniform_init(fan_in: int, fan_out: int, shape, rng: Rng, dtype=np.float32) -> np.ndarray:
    """Uniform draws on [-L, L) with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"glorot_uniform_init: fans must be positive, got ({fan_in}, {fan_out})")
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return uniform_init(shape, -limit, limit, rng, dtype)


def assert_all_finite(arr: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
