"""Deterministic RNG derivation.

Every random draw in the package comes from a generator derived here, so the
(master seed, stream tag, indices) key fully determines the outcome, no matter
in which order the draws actually execute. Stream tags keep the eval
subsample, the per-trial support draws, the per-permutation shuffles, and the
baseline selection on disjoint streams.
"""

from __future__ import annotations

import numpy as np

EVAL_SUBSAMPLE = 1
SUPPORT_DRAW = 2
PERMUTATION = 3
BASELINE_DRAW = 4


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator keyed by a master seed plus a stream tag and indices."""
    if seed < 0:
        raise ValueError("master seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))
