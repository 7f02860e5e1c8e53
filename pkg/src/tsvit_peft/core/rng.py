"""Seeded counter-based random streams (Philox)."""

from __future__ import annotations

import hashlib

import numpy as np


def _key(label: str | int) -> int:
    if isinstance(label, int):
        return label
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


class Rng:
    """A Philox stream identified by a 64-bit seed and an optional key path.

    ``child(label)`` derives an independent stream, so draws for one
    parameter never depend on how many draws were made for another.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._path = _path
        ss = np.random.SeedSequence([self.seed, *_path])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label: str | int) -> "Rng":
        return Rng(self.seed, self._path + (_key(label),))

    def uniform(self, low, high, shape) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape).astype(np.float32)

    def normal(self, std, shape) -> np.ndarray:
        return (self.gen.standard_normal(size=shape) * std).astype(np.float32)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)
