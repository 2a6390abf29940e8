"""Seedable RNG streams with a deterministic split contract.

Every stochastic entry point in the package derives its generators through
``substream(seed, *path)``.  The ``path`` is a tuple of small integers that
names the consumer (a stream id constant below) plus any loop indices
(chunk number, replication number, batch slot, ...).  Because a substream
is a pure function of ``(seed, path)``, results are identical for a given
seed no matter how work is divided among workers: parallel code assigns
one substream per chunk/slot and concatenates results in index order.
"""

from __future__ import annotations

import numpy as np

# Stream ids. Never renumber: doing so silently changes every seeded output.
STREAM_CALIBRATE = 1
STREAM_ASSIGN = 2
STREAM_NU = 3
STREAM_BATCH = 4
STREAM_SIM = 5
STREAM_INFER = 6
STREAM_ORACLE = 7
STREAM_REGRET = 8

# Fixed Monte Carlo chunk size. Part of the determinism contract: chunked
# estimators produce the same draws whether run on 1 worker or many.
CHUNK = 1 << 16


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream named by ``path``, derived from ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


def derive_seed(seed: int, *path: int) -> int:
    """64-bit child seed for a named stream; feed to APIs that take a seed."""
    state = np.random.SeedSequence(seed, spawn_key=tuple(path)).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """n child generators; deterministic given the parent's current state."""
    return rng.spawn(n)
