"""Deterministic random streams.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's Philox counter-based generator.  Philox is a fixed, documented
algorithm whose output depends only on its 64-bit key, so the same seed
produces the same stream on every platform.

Substreams are derived with :meth:`Rng.child`: the label is hashed with
blake2b into a 64-bit value and mixed into the parent seed.  Deriving a child
never consumes state from the parent, which makes per-step randomness
stateless -- step ``i`` of a training run draws from ``rng.child(f"step.{i}")``
and is therefore reproducible after a checkpoint resume without serializing
generator state.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(seed: int, label: str) -> int:
    h = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    tag = int.from_bytes(h, "little")
    # splitmix64 finalizer over seed xor tag
    z = (seed ^ tag) & _MASK64
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Seeded Philox stream with labelled substream derivation."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, label: str) -> "Rng":
        """Independent stream derived from (seed, label); parent untouched."""
        return Rng(_mix(self.seed, label))

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * scale

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
