"""Independent random streams derived from one root seed.

Each subsystem gets its own ``SeedSequence`` child keyed by a fixed
integer id (and optionally a shard/client index), so consuming draws in one
subsystem never shifts another.
"""

from __future__ import annotations

import numpy as np

SUBSYSTEMS = {
    "data": 0,
    "partition": 1,
    "gen_init": 2,
    "latent": 3,
    "labels": 4,
    "shard_choice": 5,
    "disc_init": 6,
    "batch": 7,
    "alpha": 8,
    "noise": 9,
    "warm_gen_init": 10,
    "warm_latent": 11,
    "warm_labels": 12,
    "eval": 13,
    "failure": 14,
    "sample": 15,
    "pool": 16,
}


def seed_sequence(seed: int, name: str, *index: int) -> np.random.SeedSequence:
    try:
        sid = SUBSYSTEMS[name]
    except KeyError:
        raise KeyError(f"unknown random stream {name!r}") from None
    return np.random.SeedSequence(int(seed), spawn_key=(sid, *map(int, index)))


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, name, *index))
