"""Counter-based, splittable random streams.

Keys are derived SplitMix64-style from a seed and a path of names; each
stream draws from a Philox generator keyed by its 64-bit key, so output is
identical across runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


class Stream:
    """Deterministic generator state addressed by (seed, path)."""

    def __init__(self, key: int, path: tuple = ()):
        self.key = key & _MASK
        self.path = path
        self._gen = None

    @classmethod
    def from_seed(cls, seed: int) -> "Stream":
        return cls(splitmix64(int(seed) & _MASK), (str(int(seed)),))

    def split(self, name) -> "Stream":
        name = str(name)
        return Stream(splitmix64(self.key ^ _name_key(name)), self.path + (name,))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=self.key))
        return self._gen

    def gaussian(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(int(n))

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self):
        return f"Stream({'/'.join(self.path)})"


def rng_gaussian(stream: Stream, shape):
    from .core import Tensor

    return Tensor(stream.gaussian(shape))


def rng_uniform_permutation(stream: Stream, n: int) -> list:
    return [int(i) for i in stream.permutation(n)]
