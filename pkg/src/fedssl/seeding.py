"""Deterministic RNG derivation for every random decision in a run.

Each consumer of randomness gets its own stream keyed by the experiment seed
plus structural tags (round index, client id, purpose), so reruns are
bit-identical and streams never interfere.
"""

from __future__ import annotations

import numpy as np

TAG_TRAIN_DATA = 101
TAG_TEST_DATA = 102
TAG_PARTITION = 103
TAG_MODEL_INIT = 104
TAG_SELECTION = 105
TAG_FREG_INIT = 106
TAG_CLIENT_ROUND = 107


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator keyed by a tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    """Stable integer seed derived from a key tuple (for APIs taking ints)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
