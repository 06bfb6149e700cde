"""Named random substreams derived from a single root seed.

Every source of randomness in a run is a generator derived from
``(root_seed, stream_id, *key)``.  Streams keyed by round and client index do
not depend on execution order, so results are identical for any worker count.
"""
from __future__ import annotations

import numpy as np

STREAM_SCENARIO = 1
STREAM_INIT = 2
STREAM_SAMPLING = 3
STREAM_BATCH = 4
STREAM_NOISE = 5
STREAM_PROBE = 6


def substream(seed: int, stream: int, *key: int) -> np.random.Generator:
    """Generator for the given stream, independent of all other streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), *map(int, key)]))
