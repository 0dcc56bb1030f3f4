"""Deterministic, splittable random source.

Every stochastic component takes an owned ``Rng``. Streams are derived from
one experiment seed by splitting, so data synthesis, parameter init and
support sampling stay independent: reordering draws in one stream never
perturbs another. Philox is counter-based, so sequences are reproducible
across platforms.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Wrapper around ``numpy.random.Generator`` (Philox) that can split."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed) if _seq is None else _seq
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["Rng"]:
        """Derive ``n`` independent child streams; the parent stays usable."""
        return [Rng(self.seed, child) for child in self._seq.spawn(n)]

    def child(self) -> "Rng":
        return self.split(1)[0]

    def __getattr__(self, name):
        # delegate draw methods (integers, normal, choice, permutation, ...)
        return getattr(self._gen, name)

    def __repr__(self):
        return f"Rng(seed={self.seed}, spawn_key={self._seq.spawn_key})"
