"""Deterministic RNG derivation.

Every stochastic operation in the package draws from a generator derived
here, so a single integer seed pins the whole pipeline. Sub-streams are
keyed by string tags to keep independent operations independent.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Return a Generator for (seed, *tags).

    Distinct tag tuples give statistically independent streams; the same
    tuple always gives the same stream.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            keys.append(zlib.crc32(tag.encode("utf-8")))
        else:
            keys.append(int(tag) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(keys))
