"""Named random streams derived from a single seed.

Each subsystem pulls its own generator by name ("cluster", "kmeans",
"sampler", "synth", ...) so reordering one subsystem's draws never perturbs
another's.
"""
from __future__ import annotations

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for (seed, name); independent across names."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & _U64, key]))
