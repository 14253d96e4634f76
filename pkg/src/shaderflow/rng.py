"""Seeded pseudo-random numbers that any language can reproduce bit for bit.

The generator is xoshiro256** (Blackman & Vigna).  The 256-bit state is
filled from the 64-bit seed with splitmix64:

    z = (x += 0x9E3779B97F4A7C15)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

called four times for s0..s3.  One xoshiro256** step is

    result = rotl(s1 * 5, 7) * 9
    t = s1 << 17
    s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
    s2 ^= t;  s3 = rotl(s3, 45)

with all arithmetic mod 2**64.  Derived draws:

* ``random()``: ``(next() >> 11) * 2**-53``, uniform on [0, 1).
* ``normal()``: Box-Muller on two uniforms u1, u2 with
  ``r = sqrt(-2 ln(1 - u1))``; yields ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)`` on the following call.
* ``integers(n)``: ``next() % n`` (bias is negligible for the small n used).
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** generator with float, normal and integer helpers."""

    def __init__(self, seed: int = 0):
        if not 0 <= seed <= _MASK:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        sm = seed
        state = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            state.append(out)
        self._s = state
        self._spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * self.random()

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        angle = 2.0 * math.pi * u2
        self._spare = r * math.sin(angle)
        return r * math.cos(angle)

    def integers(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def normals(self, shape) -> np.ndarray:
        size = int(np.prod(shape, dtype=np.int64))
        return np.array([self.normal() for _ in range(size)], dtype=np.float64).reshape(shape)

    def uniforms(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape, dtype=np.int64))
        return np.array([self.uniform(low, high) for _ in range(size)], dtype=np.float64).reshape(shape)

    def spawn(self) -> "Xoshiro256":
        """Child generator seeded from this one's next output."""
        return Xoshiro256(self.next_u64())
