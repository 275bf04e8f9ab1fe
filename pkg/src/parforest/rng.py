"""Deterministic keyed random-number streams.

Every random decision in this package (train/test split, per-tree bootstrap
and feature sampling, synthetic data) draws from its own stream, identified
by a (purpose, index) key. A stream's output is a pure function of
(master seed, key, counter), so any worker, rank, or engine can recreate any
stream at any position and get bit-identical draws. That property is what
makes forests built by different engines tree-for-tree identical.

The generator is a counter-based Philox-4x32-10 block cipher: the 64-bit
master seed is the cipher key, the stream key occupies half of the 128-bit
counter block, and the draw counter occupies the other half. Creating a
stream is O(1) and streams never share state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK32 = 0xFFFFFFFF
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Philox-4x32 round constants (Salmon et al. multipliers / Weyl increments).
_M0 = 0xD2511F53
_M1 = 0xCD9E8D57
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85

# Stream purposes. The code is packed into the top byte of the key word, the
# index into the low 56 bits, so every (purpose, index) pair maps to a unique
# 64-bit key word.
PURPOSE_CODES = {"split": 0, "tree": 1, "synth": 2, "fuzz": 3}
_MAX_INDEX = (1 << 56) - 1


@dataclass(frozen=True)
class StreamKey:
    """Identity of one logical random decision: a purpose tag plus an index
    (e.g. the global tree index for per-tree streams)."""

    purpose: str
    index: int

    def __post_init__(self):
        if self.purpose not in PURPOSE_CODES:
            raise ValueError(f"unknown stream purpose {self.purpose!r}; "
                             f"expected one of {sorted(PURPOSE_CODES)}")
        if not 0 <= self.index <= _MAX_INDEX:
            raise ValueError(f"stream index {self.index} out of range [0, 2**56)")

    def keyword(self) -> int:
        """Pack purpose and index into the 64-bit key word."""
        return (PURPOSE_CODES[self.purpose] << 56) | self.index


def philox_u64(seed: int, keyword: int, counter: int) -> int:
    """One 64-bit output of Philox-4x32-10 at (seed, keyword, counter).

    Pure integer arithmetic, identical on every platform. The numba kernels
    in _kernels.py mirror this function exactly (cross-checked by tests).
    """
    c0 = counter & _MASK32
    c1 = (counter >> 32) & _MASK32
    c2 = keyword & _MASK32
    c3 = (keyword >> 32) & _MASK32
    k0 = seed & _MASK32
    k1 = (seed >> 32) & _MASK32
    for _ in range(10):
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0 = p0 >> 32
        lo0 = p0 & _MASK32
        hi1 = p1 >> 32
        lo1 = p1 & _MASK32
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return (c1 << 32) | c0


def _philox_u64_bulk(seed: int, keyword: int, start: int, count: int) -> np.ndarray:
    """Vectorized philox_u64 over counters [start, start+count); uint64 array.

    Bit-identical to the scalar path (all words held in uint64, values < 2**32
    so 32x32 products are exact).
    """
    ctr = (np.arange(start, start + count, dtype=np.uint64)) & np.uint64(_MASK64)
    mask = np.uint64(_MASK32)
    c0 = ctr & mask
    c1 = (ctr >> np.uint64(32)) & mask
    c2 = np.full(count, keyword & _MASK32, dtype=np.uint64)
    c3 = np.full(count, (keyword >> 32) & _MASK32, dtype=np.uint64)
    k0 = np.uint64(seed & _MASK32)
    k1 = np.uint64((seed >> 32) & _MASK32)
    m0 = np.uint64(_M0)
    m1 = np.uint64(_M1)
    for _ in range(10):
        p0 = c0 * m0
        p1 = c2 * m1
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & mask
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & mask
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + np.uint64(_W0)) & mask
        k1 = (k1 + np.uint64(_W1)) & mask
    return (c1 << np.uint64(32)) | c0


class RngStream:
    """A positioned stream: (seed, key, counter). Value-like; draws advance
    the counter, and recreating the stream at the same counter replays the
    exact sequence."""

    __slots__ = ("seed", "key", "counter", "_keyword")

    def __init__(self, seed: int, key: StreamKey, counter: int = 0):
        self.seed = seed & _MASK64
        self.key = key
        self.counter = counter & _MASK64
        self._keyword = key.keyword()

    def next_u64(self) -> int:
        """Next 64-bit draw; advances the counter by one position."""
        v = philox_u64(self.seed, self._keyword, self.counter)
        self.counter = (self.counter + 1) & _MASK64
        return v

    def next_u64_array(self, count: int) -> np.ndarray:
        """`count` draws at once (uint64 array); same values as `count`
        successive next_u64 calls."""
        out = _philox_u64_bulk(self.seed, self._keyword, self.counter, count)
        self.counter = (self.counter + count) & _MASK64
        return out

    def uniform(self) -> float:
        """Uniform float in [0, 1): top 53 bits of one draw over 2**53."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_array(self, count: int) -> np.ndarray:
        """`count` uniforms in [0, 1); same values as successive uniform()."""
        return (self.next_u64_array(count) >> np.uint64(11)) * 2.0**-53

    def rand_below(self, m: int) -> int:
        """Unbiased integer in [0, m) by rejection sampling (never modulo
        bias). Consumes one draw per attempt."""
        if m < 1:
            raise ValueError(f"rand_below requires m >= 1, got {m}")
        # Accept draws in [r, 2**64), a range whose size is a multiple of m.
        r = ((1 << 64) - m) % m
        while True:
            u = self.next_u64()
            if u >= r:
                return (u - r) % m

    def sample_with_replacement(self, m: int, k: int) -> list[int]:
        """k independent indices in [0, m)."""
        return [self.rand_below(m) for _ in range(k)]

    def sample_without_replacement(self, m: int, k: int) -> list[int]:
        """k distinct indices in [0, m) via a partial Fisher-Yates shuffle."""
        if k > m:
            raise ValueError(f"cannot draw {k} distinct indices from population {m}")
        arr = list(range(m))
        for i in range(k):
            j = i + self.rand_below(m - i)
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:k]


def make_stream(seed: int, key: StreamKey) -> RngStream:
    """Create the stream for (seed, key), positioned at counter 0."""
    return RngStream(seed, key, 0)
