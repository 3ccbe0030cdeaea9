"""Seeded random streams.

All randomness flows from PCG64 generators derived from a root seed plus a
stage name (``"datagen"``, ``"augment"``, ``"init"``, ``"shuffle"``, ...), so
re-running one stage never perturbs the draws of another.
"""
import zlib

import numpy as np


def _key(name):
    return zlib.crc32(str(name).encode("utf-8"))


def substream(seed, *names):
    """Independent generator for ``(seed, names...)``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(seq))


def subseed(seed, *names):
    """A 32-bit integer seed derived like :func:`substream`."""
    return int(substream(seed, *names).integers(0, 2**31 - 1))
