"""Deterministic random streams for weight init, shuffling, and synthetic data.

The generator family is fixed so that every run of every command is bitwise
reproducible from a single 64-bit seed:

* ``splitmix64`` expands a seed into independent 64-bit words.
* ``xoshiro256++`` is the draw stream; its 4-word state is the first four
  splitmix64 outputs of the seed.

Two stream shapes exist and both are part of the reproducibility contract:

* :class:`Rng` is a single sequential xoshiro256++ stream, used for scalar
  draws (shuffle indices, per-tensor and per-image derived seeds).
* :func:`fill_uniform` is a bulk stream of ``LANES`` (8192) xoshiro256++
  generators stepped in lockstep. Lane ``j`` is seeded with splitmix64
  outputs ``4j+1 .. 4j+4`` of the fill seed, and element ``i`` of the fill
  is lane ``i % LANES`` at step ``i // LANES``. Bulk values are mapped to
  floats as ``(u >> 11) * 2**-53`` (so they lie in ``[0, 1)``), scaled in
  float64, then rounded once to the requested dtype.

Bounded integers use plain modulo (``next_u64() % n``); shuffles are
descending Fisher-Yates. None of this is meant to be cryptographic.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

#: Lane count of the bulk stream. Changing it changes every bulk draw.
LANES = 8192


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` splitmix64 outputs of ``seed`` as a uint64 vector.

    The splitmix64 state after k steps is ``seed + k * golden`` mod 2**64,
    which is why the whole sequence vectorizes.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    steps = np.arange(1, n + 1, dtype=np.uint64)
    state = np.uint64(seed & _MASK) + steps * np.uint64(_GOLDEN)
    z = (state ^ (state >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """Sequential xoshiro256++ stream seeded via splitmix64."""

    def __init__(self, seed: int):
        state = seed & _MASK
        words = []
        for _ in range(4):
            state = (state + _GOLDEN) & _MASK
            words.append(_mix(state))
        self._s = words

    def next_u64(self) -> int:
        s = self._s
        out = (_rotl((s[0] + s[3]) & _MASK, 23) + s[0]) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return out

    def next_float(self) -> float:
        """Uniform draw in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def next_below(self, n: int) -> int:
        """Uniform-ish integer in [0, n) via modulo reduction."""
        if n <= 0:
            raise ValueError(f"n must be >= 1, got {n}")
        return self.next_u64() % n

    def derive_seed(self) -> int:
        """A fresh 64-bit seed for a subordinate stream."""
        return self.next_u64()

    def shuffle(self, items) -> None:
        """In-place descending Fisher-Yates shuffle of a mutable sequence."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        out = list(range(n))
        self.shuffle(out)
        return np.asarray(out, dtype=np.int64)


def fill_uniform(seed: int, n: int, low: float = 0.0, high: float = 1.0,
                 dtype=np.float32) -> np.ndarray:
    """``n`` uniform values in [low, high) from the lane-parallel bulk stream.

    See the module docstring for the exact lane layout; the same (seed, n)
    always yields the same bytes, and a shorter fill is a prefix of a longer
    one with the same seed.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n == 0:
        return np.empty(0, dtype=dtype)
    lane_words = splitmix64(seed, 4 * LANES)
    s0 = lane_words[0::4].copy()
    s1 = lane_words[1::4].copy()
    s2 = lane_words[2::4].copy()
    s3 = lane_words[3::4].copy()

    def rotl(x, k):
        return (x << np.uint64(k)) | (x >> np.uint64(64 - k))

    steps = -(-n // LANES)
    out = np.empty(steps * LANES, dtype=np.uint64)
    for step in range(steps):
        out[step * LANES:(step + 1) * LANES] = rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = rotl(s3, 45)
    unit = (out[:n] >> np.uint64(11)) * 2.0 ** -53
    return (low + (high - low) * unit).astype(dtype)
