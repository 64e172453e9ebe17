"""Seed handling shared by every stochastic routine."""

from __future__ import annotations

import numpy as np


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def spawn(seed, n: int) -> list[np.random.SeedSequence]:
    """Counter-based child seeds: child i depends only on (seed, i)."""
    return seed_sequence(seed).spawn(n)
