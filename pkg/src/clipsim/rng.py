"""Deterministic splittable randomness.

Every source of randomness in the library flows through `Rng`, a thin
wrapper over numpy's counter-based Philox generator. Child streams are
derived by hashing the parent key together with a string label
(SHA-256, truncated to a 128-bit Philox key), so any part of a run can
be reproduced from the top-level seed plus the label path alone.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng"]


class Rng:
    """Seeded Philox stream with deterministic named splits."""

    def __init__(self, seed: int, _key: bytes | None = None):
        if _key is None:
            _key = int(seed).to_bytes(16, "little", signed=False)
        self._key = _key
        self.seed = seed
        key_int = int.from_bytes(_key, "little")
        self.gen = np.random.Generator(np.random.Philox(key=key_int))

    def split(self, label: str) -> "Rng":
        """Derive an independent child stream identified by `label`."""
        digest = hashlib.sha256(self._key + label.encode("utf-8")).digest()
        return Rng(self.seed, _key=digest[:16])

    # Convenience passthroughs; everything returns numpy types.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self.gen.choice(n, size=size, replace=replace)

    def coin(self, p=0.5) -> bool:
        return bool(self.gen.uniform() < p)
