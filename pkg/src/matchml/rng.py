"""Seeded, counter-based random streams.

Every random draw in the package goes through :func:`generator` so that a
single unsigned 64-bit seed (plus an optional stream path) fully determines
the output.  Philox is counter-based, so replication ``r`` of an experiment
can be generated without touching replications ``0..r-1``.
"""

from __future__ import annotations

import numpy as np

U64_MAX = 2**64 - 1


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= U64_MAX:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def generator(seed, *stream: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an integer stream path."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *stream: int) -> int:
    """Child seed for ``stream``; independent of evaluation order."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(s) for s in stream))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
