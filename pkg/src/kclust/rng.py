"""Seeded random streams.

All randomness comes from numpy's PCG64 seeded through ``SeedSequence``.
A stream is identified by ``(base_seed, tag, trial)``; the tag is hashed
with CRC32 so adding a new tag never shifts an existing stream.
"""
import zlib

import numpy as np


def tag_key(tag):
    return zlib.crc32(tag.encode("utf-8"))


def stream(base_seed, tag, trial=0):
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(tag_key(tag), int(trial)))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
