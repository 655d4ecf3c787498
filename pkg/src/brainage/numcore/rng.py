"""Deterministic, platform-independent random streams.

The generator is Philox-4x64 (a counter-based bit generator, Salmon et al.
2011) as shipped with numpy.  A stream is identified by ``(seed, stream)``;
the 128-bit Philox key is the first 16 bytes of ``blake2b("<seed>/<stream>")``
read as two little-endian uint64 words, and the counter starts at zero.
Identical ``(seed, stream, call sequence)`` therefore yields identical
draws on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, stream: int | str | tuple = 0) -> np.ndarray:
    if isinstance(stream, tuple):
        stream = "/".join(str(s) for s in stream)
    digest = hashlib.blake2b(f"{int(seed)}/{stream}".encode(), digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").astype(np.uint64)


def stable_hash(*parts) -> int:
    """63-bit hash of ``parts`` that is stable across runs and platforms."""
    digest = hashlib.blake2b("/".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


class DeterministicRng:
    """Seeded random stream with cheap derivation of independent substreams."""

    def __init__(self, seed: int, stream: int | str | tuple = 0):
        self.seed = int(seed)
        self.stream = stream
        self._gen = np.random.Generator(np.random.Philox(key=derive_key(seed, stream)))

    def substream(self, stream: int | str | tuple) -> "DeterministicRng":
        """Independent child stream; does not consume draws from ``self``."""
        if isinstance(self.stream, tuple):
            base = self.stream
        else:
            base = (self.stream,)
        if not isinstance(stream, tuple):
            stream = (stream,)
        return DeterministicRng(self.seed, base + stream)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None, endpoint=False):
        return self._gen.integers(low, high, size=size, endpoint=endpoint)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)
