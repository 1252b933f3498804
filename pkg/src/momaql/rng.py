"""Per-purpose random streams.

Every consumer draws from its own ``numpy.random.Generator`` backed by PCG64.
Stream ``name`` for run seed ``seed`` is seeded with
``SeedSequence(seed, spawn_key=(STREAM_IDS[name],))`` so adding draws to one
purpose never shifts another.
"""
import numpy as np

STREAM_IDS = {
    "init": 1,
    "data": 2,
    "noise": 3,
    "time": 4,
    "env": 5,
    "eval": 6,
    "gen": 7,
    "anchor": 8,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; ``extra`` ints derive sub-streams."""
    key = (STREAM_IDS[name],) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def streams(seed: int, *names: str) -> dict:
    return {n: stream(seed, n) for n in names}
