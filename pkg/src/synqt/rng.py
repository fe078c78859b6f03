"""Seeded PCG64 randomness with named substreams.

Every stochastic step in the package (init, data generation, feature
dropping, shuffling) draws from an explicitly passed :class:`Rng`; there is
no ambient global state.  Identical seeds give identical draw sequences.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, name):
        """An independent stream derived from (seed, name)."""
        digest = hashlib.blake2b(f"{self.seed}:{name}".encode(), digest_size=8)
        return Rng(int.from_bytes(digest.digest(), "little"))

    def normal(self, shape, std=1.0):
        return self._gen.standard_normal(shape) * std

    def trunc_normal(self, shape, std=0.02, clip=2.0):
        """Normal draws redrawn until within ±clip sigmas, then scaled."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > clip
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > clip
        return out * std

    def uniform(self, shape):
        return self._gen.random(shape)

    def keep_mask(self, keep_prob, size):
        return self._gen.random(size) < keep_prob

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high=high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)
