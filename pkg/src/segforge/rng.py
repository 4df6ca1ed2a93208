"""Deterministic, platform-independent random number generation.

Everything downstream (trajectory synthesis, the oracle backend, fixture
generation) must be byte-reproducible from a 64-bit seed, so we avoid
``random``/``numpy.random`` and use a small splitmix64 generator plus a
stable keyed hash for deriving per-sample seeds.
"""

from __future__ import annotations

import hashlib
import math

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def stable_key(*parts: object) -> int:
    """Derive a 64-bit key from arbitrary parts via blake2b.

    Python's builtin ``hash`` is salted per process for strings, so it
    cannot be used for reproducible seeding.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class SplitMix64:
    """splitmix64 generator with helpers for uniforms and Gaussians."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) / float(1 << 53)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError("empty range")
        return lo + self.next_u64() % (hi - lo + 1)

    def gauss_pair(self, sigma: float) -> tuple[float, float]:
        """One Box-Muller transform: two independent N(0, sigma^2) draws.

        Always consumes exactly two uniforms, in a fixed order, so jittered
        points cost a constant number of RNG draws regardless of sigma.
        """
        u1 = self.uniform()
        u2 = self.uniform()
        if sigma == 0.0:
            return 0.0, 0.0
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        theta = 2.0 * math.pi * u2
        return sigma * r * math.cos(theta), sigma * r * math.sin(theta)


def round_half_up(x: float) -> int:
    """Deterministic rounding; avoids banker's rounding surprises."""
    return math.floor(x + 0.5)
