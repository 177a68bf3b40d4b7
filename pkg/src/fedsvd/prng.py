"""Portable seeded Gaussian stream.

Every party that regenerates the mask P from a broadcast seed must obtain the
same bits, so the generator is fixed rather than delegated to numpy:

* state: xoshiro256** (256-bit), seeded by four successive splitmix64 outputs
  of the 64-bit seed;
* uniforms: ``(x >> 11) * 2**-53`` in [0, 1);
* normals: Box-Muller on consecutive uniform pairs ``(u1, u2)`` producing
  ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)`` with ``r = sqrt(-2*log(1 - u1))``.
"""
from __future__ import annotations

import math

import numba
import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _xoshiro_fill(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


@numba.njit(cache=True)
def _box_muller(raw, out):
    scale = 1.0 / 9007199254740992.0
    two_pi = 2.0 * math.pi
    for i in range(raw.shape[0] // 2):
        u1 = float(raw[2 * i] >> np.uint64(11)) * scale
        u2 = float(raw[2 * i + 1] >> np.uint64(11)) * scale
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        out[2 * i] = r * math.cos(two_pi * u2)
        out[2 * i + 1] = r * math.sin(two_pi * u2)


class SeededGaussianStream:
    """Infinite, reproducible stream of N(0, 1) draws.

    Not thread-safe; each stream has a single owner.
    """

    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = seed
        words, x = [], seed
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._state = np.array(words, dtype=np.uint64)
        self._spare: float | None = None
        self.draws = 0

    def next_u64(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.uint64)
        if count:
            _xoshiro_fill(self._state, out)
        return out

    def normal(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.float64)
        pos = 0
        if count and self._spare is not None:
            out[0] = self._spare
            self._spare = None
            pos = 1
        need = count - pos
        if need > 0:
            pairs = (need + 1) // 2
            fresh = np.empty(2 * pairs, dtype=np.float64)
            _box_muller(self.next_u64(2 * pairs), fresh)
            out[pos:] = fresh[:need]
            if 2 * pairs > need:
                self._spare = float(fresh[-1])
        self.draws += count
        return out

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        """Row-major matrix of fresh draws."""
        return self.normal(rows * cols).reshape(rows, cols)


def derive_seed(*parts: int) -> int:
    """Deterministically mix integers into a fresh 64-bit seed."""
    acc = 0x6A09E667F3BCC909
    for p in parts:
        acc, _ = splitmix64(acc ^ (int(p) & MASK64))
        _, acc = splitmix64(acc)
    return acc
