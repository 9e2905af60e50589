"""Deterministic named random streams.

Every random draw in the package derives from a single master seed through a
keyed sub-stream, so datasets, weight initialization, noise and shuffling can
be reproduced (and parallelized) independently of each other: stream(seed, k)
for a given key tuple always yields the same generator, no matter what was
drawn elsewhere.
"""
from __future__ import annotations

import numpy as np

# top-level stream ids
CHANNEL = 0   # cluster field of one sample        key: (CHANNEL, sample_index)
NOISE = 1     # additive CSI noise of one sample   key: (NOISE, sample_index, cnr_key)
INIT = 2      # network weight init                key: (INIT, network_id)
SHUFFLE = 3   # epoch shuffling                    key: (SHUFFLE, stage_id, epoch)

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _as_key(value) -> int:
    return int(value) & 0xFFFFFFFF


def cnr_key(cnr_db: float) -> int:
    """Stable integer key for a CNR value (milli-dB resolution)."""
    return _as_key(round(float(cnr_db) * 1000.0))


def stream(master_seed: int, *key) -> np.random.Generator:
    """Generator for the sub-stream addressed by ``key`` under ``master_seed``."""
    seq = np.random.SeedSequence(
        entropy=int(master_seed) & _MASK64,
        spawn_key=tuple(_as_key(k) for k in key),
    )
    return np.random.Generator(np.random.PCG64(seq))
