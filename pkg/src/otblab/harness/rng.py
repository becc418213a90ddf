"""Seeded random streams.

Every stream is a Philox4x64-10 counter-based generator keyed by a
``SeedSequence`` built from ``(seed, *stream)``. Philox output depends only
on key and counter, so a given ``(seed, stream)`` reproduces the same
numbers on every platform numpy supports.
"""

import numpy as np

ROLLOUT = 1
EVAL = 2
MONTE_CARLO = 3
INSTANCE = 4
GROUPS = 5


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def derive_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, stream)]).generate_state(1, np.uint64)[0] >> np.uint64(1))
