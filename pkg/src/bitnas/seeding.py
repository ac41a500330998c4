"""All randomness flows from one seed through named substreams."""

from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for (seed, stream); stable across runs."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(stream.encode("utf-8"))])
    )
