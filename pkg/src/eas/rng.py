"""Seeded, splittable random streams.

Every stochastic operation in the package draws from an explicit
:class:`RngStream`.  Streams are identified by a key path: a child stream
derived under the same name from the same parent always produces the same
sequence, independent of what any sibling stream consumed.  This is what
makes runs reproducible while letting individual mechanisms (weight init,
data order, dropout masks, gate noise, ...) be toggled without perturbing
each other.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_to_int(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStream:
    """A named pseudo-random stream backed by numpy's PCG64 generator."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.default_rng(np.random.SeedSequence((self.seed, *self.key)))

    def child(self, name: str) -> "RngStream":
        """Derive an independent stream; same (seed, path) -> same stream."""
        return RngStream(self.seed, self.key + (_name_to_int(name),))

    def split(self, n: int) -> list["RngStream"]:
        """Derive ``n`` independent indexed children."""
        return [self.child(f"split-{i}") for i in range(n)]

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    # Thin pass-throughs for the handful of draws the package uses.
    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float64):
        return self._gen.uniform(low, high, size=size).astype(dtype, copy=False)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=np.float32):
        return self._gen.normal(loc, scale, size=size).astype(dtype, copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"
