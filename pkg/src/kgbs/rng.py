"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for component ``name`` (e.g. ``"train"``).

    The same (seed, name, extra) always yields the same stream, and streams
    with different names do not overlap in practice.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8")), *(int(x) for x in extra)]
    return np.random.default_rng(np.random.SeedSequence(key))


def derive_seed(seed: int, name: str, *extra: int) -> int:
    return int(substream(seed, name, *extra).integers(0, 2**63 - 1))
