"""Counter-based random streams keyed by ``(seed, label)``.

Streams use numpy's Philox bit generator with a key derived from the master
seed and a label, so each consumer (data, init, augmentation, sampling, ...)
draws from its own independent sequence.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}/{label}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = label
        self._gen = np.random.Generator(np.random.Philox(key=_key(self.seed, label)))

    def child(self, label: str) -> "RngStream":
        """Independent stream for a sub-component; does not consume draws here."""
        return RngStream(self.seed, f"{self.label}/{label}")

    @property
    def counter(self):
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def __getattr__(self, name):
        if name.startswith("_"):
            raise AttributeError(name)
        # integers, uniform, random, permutation, choice, normal, ...
        return getattr(self._gen, name)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r})"
