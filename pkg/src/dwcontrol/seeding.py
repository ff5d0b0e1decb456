"""Deterministic RNG stream derivation from a single master seed."""

from __future__ import annotations

import numpy as np


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def spawn_generators(seed, n: int) -> list[np.random.Generator]:
    """n independent generators derived from the master seed by stream index."""
    return [np.random.default_rng(s) for s in as_seed_sequence(seed).spawn(n)]
