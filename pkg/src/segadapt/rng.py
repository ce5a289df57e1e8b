"""Deterministic seeding: one 64-bit seed fans out to independent child streams.

Child seeds are derived by hashing (parent seed, labels...) with SHA-256, so
a given seed produces bit-identical streams across runs and platforms and
parallel tasks never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "make_rng", "SeededRng"]

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *labels: int | str) -> int:
    """Hash (seed, labels...) into a new 64-bit seed."""
    h = hashlib.sha256()
    h.update(str(int(seed) & _MASK64).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a seed; numpy guarantees a platform-stable stream."""
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))


class SeededRng:
    """A seed plus its generator; `child` derives an independent labeled stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.generator = make_rng(self.seed)

    def child(self, *labels: int | str) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *labels))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"
