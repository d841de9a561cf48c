"""
Seed splitting.

Every random stream in a run is derived from one master seed as
``SeedSequence(master, spawn_key=(PURPOSE[purpose], index))``; the 64-bit
seed recorded in reports is the first ``uint64`` word of that sequence.
"""

from __future__ import annotations

import numpy as np

PURPOSE = {
    "gap_spec": 1,
    "design_sim": 2,
    "split": 3,
    "fresh_asset": 4,
}


def derive_seed(master: int, purpose: str, index: int = 0) -> int:
    seq = np.random.SeedSequence(int(master), spawn_key=(PURPOSE[purpose], int(index)))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed``; ``stream`` selects an independent sub-stream."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(stream)))
