"""Seed-addressable random streams.

Every stochastic draw in training comes from ``stream(seed, *path)``: a Philox
counter-based generator keyed by the run seed plus a path such as
``("rollout", epoch, step)``. Streams are independent of call order, so
resuming mid-run reproduces the uninterrupted run exactly.
"""
import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed, *path):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
