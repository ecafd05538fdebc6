"""Splittable counter-based random streams.

A stream is a Philox generator keyed by (seed, stream id). Child streams get
their id from a stable hash of the parent id and a label, so the same label
path always gives the same draws, independent of what other streams did.
"""
import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def _derive(stream, labels):
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", stream))
    for label in labels:
        h.update(b"\x00")
        h.update(repr(label).encode())
    return struct.unpack("<Q", h.digest())[0]


class Rng:
    __slots__ = ("seed", "stream", "gen")

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.gen = np.random.Generator(np.random.Philox(key=self.seed | (self.stream << 64)))

    def child(self, *labels):
        return Rng(self.seed, _derive(self.stream, labels))

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream:#x})"
