"""Seeded random streams, one per purpose.

Streams are numpy ``Generator`` objects over PCG64, whose output for a given
seed is platform independent. Each purpose gets its own stream so that e.g.
turning dropout off does not shift the data shuffling sequence.
"""

from __future__ import annotations

import copy

import numpy as np

STREAMS = {
    "init": 0,
    "dropout": 1,
    "shuffle": 2,
    "synth": 3,
    "select": 4,
    "eval": 5,
    "split": 6,
    "gradcheck": 7,
}


def stream(seed: int, purpose: str) -> np.random.Generator:
    if purpose not in STREAMS:
        raise KeyError(f"unknown rng stream {purpose!r}")
    seq = np.random.SeedSequence([int(seed), STREAMS[purpose]])
    return np.random.Generator(np.random.PCG64(seq))


def get_state(rng: np.random.Generator) -> dict:
    return copy.deepcopy(rng.bit_generator.state)


def from_state(state: dict) -> np.random.Generator:
    bitgen = np.random.PCG64()
    bitgen.state = copy.deepcopy(state)
    return np.random.Generator(bitgen)
