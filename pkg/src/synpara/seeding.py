"""Named deterministic RNG sub-streams.

All randomness in the package flows from one integer seed; each component
draws from its own named stream so that, e.g., regenerating the corpus does
not perturb weight initialization.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for the (seed, name) stream.

    Streams with different names are statistically independent; the same
    (seed, name) pair always yields the same sequence, on any platform.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
