"""Seeded random streams.

Backed by numpy's PCG64, whose output is specified bit-for-bit and therefore
identical across platforms for a given seed.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError

_MASK64 = (1 << 64) - 1


class Rng:
    """Seedable generator with a serializable 128-bit PCG64 state."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> "Rng":
        """Independent stream derived from this seed and ``keys``."""
        ss = np.random.SeedSequence([self.seed & _MASK64, *[int(k) & _MASK64 for k in keys]])
        out = Rng.__new__(Rng)
        out.seed = self.seed
        out.gen = np.random.Generator(np.random.PCG64(ss))
        return out

    # thin pass-throughs used across the package
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def to_bytes(self) -> bytes:
        st = self.gen.bit_generator.state
        inner = st["state"]
        return struct.pack(
            "<QQQQQIQ",
            self.seed & _MASK64,
            inner["state"] & _MASK64, inner["state"] >> 64,
            inner["inc"] & _MASK64, inner["inc"] >> 64,
            int(st["has_uint32"]), int(st["uinteger"]),
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Rng":
        if len(blob) != struct.calcsize("<QQQQQIQ"):
            raise FormatError(f"rng state must be 52 bytes, got {len(blob)}")
        seed, s_lo, s_hi, i_lo, i_hi, has32, uint = struct.unpack("<QQQQQIQ", blob)
        out = cls(seed)
        out.gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
            "has_uint32": has32,
            "uinteger": uint,
        }
        return out
