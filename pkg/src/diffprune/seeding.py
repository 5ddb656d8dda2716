"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("training", "masking", "random-prune", "eval", "init")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` under ``seed``.

    The stream key is a stable CRC of the name, so results do not depend on
    the order in which streams are requested.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
