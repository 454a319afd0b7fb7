"""Deterministic per-trajectory random streams.

Trajectory ``i`` of an ensemble seeded with ``master_seed`` draws from a
Philox counter-based generator keyed by a 64-bit child seed obtained from
``SeedSequence(master_seed, spawn_key=(i,))``. The child seed depends only
on ``(master_seed, i)``, so ensembles can be split across any number of
workers and still reproduce bit-for-bit.
"""

from __future__ import annotations

import numpy as np

PRNG_ALGORITHM = (
    "numpy Philox4x64-10; key = SeedSequence(entropy=master_seed, "
    "spawn_key=(trajectory_index,)).generate_state(1, uint64)[0]"
)


def child_seed(master_seed: int, index: int) -> int:
    if master_seed < 0 or index < 0:
        raise ValueError("seeds and indices must be nonnegative")
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def child_rngs(master_seed: int, start: int, stop: int) -> tuple[list[int], list[np.random.Generator]]:
    seeds = [child_seed(master_seed, i) for i in range(start, stop)]
    return seeds, [make_rng(s) for s in seeds]
