"""Deterministic seed derivation for every stochastic stage.

All randomness in the pipeline flows from one experiment seed through
``derive_seed``, so repeated runs (and resumed runs) draw identical streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Map a tuple of ints/strings to a stable 32-bit seed."""
    entropy = [zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p)
               for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
