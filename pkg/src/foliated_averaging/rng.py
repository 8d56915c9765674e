"""Counter-based random streams keyed by (seed, path index, process tag)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stable integer codes so that keys never depend on string hashing.
TAGS = {
    "Z": 0,
    "Ztilde": 1,
    "leaf": 2,
    "sample": 3,
}


@dataclass(frozen=True)
class RandomStreams:
    """Factory for independent, individually reproducible Philox generators.

    Every (index, tag) pair maps to its own generator, so path ``i`` of the
    leaf noise ``Z`` can be regenerated without touching any other path, and
    ``Z`` and ``Ztilde`` are independent by construction.
    """

    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def generator(self, index: int = 0, tag: str = "Z") -> np.random.Generator:
        if tag not in TAGS:
            raise KeyError(f"unknown stream tag {tag!r}; known: {sorted(TAGS)}")
        if index < 0:
            raise ValueError("stream index must be nonnegative")
        seq = np.random.SeedSequence([int(self.seed), int(index), TAGS[tag]])
        return np.random.Generator(np.random.Philox(seq))
