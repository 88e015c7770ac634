"""Seeded random substreams.

Every consumer asks for a stream by ``(purpose, index)``; the stream depends
only on the master seed and that pair, never on call order or worker count.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _purpose_key(purpose: str) -> int:
    return int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class Rng:
    master_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a non-negative 64-bit integer")

    def stream(self, purpose: str, index: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(_purpose_key(purpose), int(index)))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, purpose: str, index: int = 0) -> Rng:
        """A derived Rng whose own streams are independent of this one's."""
        seed = int(self.stream(purpose, index).integers(0, 2**63))
        return Rng(seed)
