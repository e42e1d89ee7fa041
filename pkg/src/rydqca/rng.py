"""Seeding scheme: every random stream is a Philox generator keyed by a tuple of
non-negative integers (seed, stream tag, trajectory index, ...), so results do
not depend on how work is split between workers."""

from __future__ import annotations

import numpy as np

STREAM_SAMPLING = 1
STREAM_TRAJECTORY = 2
STREAM_FROZEN_NOISE = 3


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    ss = np.random.SeedSequence(entropy)
    return np.random.Generator(np.random.Philox(ss))
