"""Seeded, named random substreams.

Every stochastic site in the package (parameter init, dropout masks,
negative sampling, shuffling, synthetic data) pulls its generator from a
single root seed through a named substream, so one --seed value pins an
entire run. Streams are counter-based (Philox) and keyed by a SHA-256
digest of ``seed:name``, which is stable across platforms and processes,
unlike Python's built-in hash().
"""

from __future__ import annotations

import hashlib

import numpy as np


class SeededRng:
    """Root of a tree of independent, reproducible random substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        """Return a fresh generator for the named substream.

        Calling twice with the same name yields generators that produce
        identical draw sequences.
        """
        digest = hashlib.sha256(f"{self.seed}:{name}".encode("utf-8")).digest()
        key = int.from_bytes(digest[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))
