"""Counter-based random streams: one independent Philox stream per (seed, replicate, purpose)."""
from __future__ import annotations

import numpy as np

# stream ids separate independent uses of the same (seed, replicate) pair
STREAM_FULL = 0
STREAM_NATIVE = 1
STREAM_IMMIGRATION = 2
STREAM_EXACT = 3
STREAM_COUPLED = 4

_U64 = (1 << 64) - 1


def seed_stream(master_seed: int, replicate_index: int, stream_id: int = STREAM_FULL) -> np.random.Generator:
    """Philox generator keyed by (replicate_index, master_seed), counter offset by stream_id.

    Streams never depend on scheduling: the key is a pure function of the arguments.
    """
    if not 0 <= master_seed <= _U64:
        raise ValueError("master_seed must be an unsigned 64-bit integer")
    if not 0 <= replicate_index <= _U64:
        raise ValueError("replicate_index must be an unsigned 64-bit integer")
    key = (int(replicate_index) << 64) | int(master_seed)
    # stream id in the top counter word: streams are 2^192 draws apart
    bitgen = np.random.Philox(key=key, counter=[0, 0, 0, int(stream_id)])
    return np.random.Generator(bitgen)
