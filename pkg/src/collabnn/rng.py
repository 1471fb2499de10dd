"""Seeded, counter-based random streams.

Every stochastic choice in the library (weight init, dropout masks, label
noise, shuffling, synthetic data) draws from a Philox generator keyed by the
run seed plus a stream tag, so a run is fully determined by (config, seed)
and the streams never interact.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Keep values stable: they are part of the reproducibility contract.
STREAM_INIT = 0
STREAM_MASKS = 1
STREAM_NOISE_INDEX = 2
STREAM_NOISE_VALUE = 3
STREAM_SHUFFLE = 4
STREAM_DATA_TEMPLATE = 5
STREAM_DATA_TRAIN = 6
STREAM_DATA_TEST = 7


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for (seed, key).

    Identical (seed, key) always yields an identical stream; distinct keys
    yield statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    """Derive a child integer seed from (seed, key), e.g. for sweep runs."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFF)
