"""Shared helpers: deterministic RNG derivation."""

from __future__ import annotations

import numpy as np


def spawn_rng(*keys: int) -> np.random.Generator:
    """Independent generator derived from an integer key path.

    Workers derive their stream from (global_seed, index, ...) so that
    parallelism or call order never changes sampled values.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))
