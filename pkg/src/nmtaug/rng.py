"""Named random substreams derived from a single root seed.

Every stochastic decision in the package draws from ``substream(seed, name,
*counters)``.  Streams are counter-based (Philox), so a stream for step ``s``
can be rebuilt after a restart without replaying earlier draws, and changing
one stream (say, masking) never perturbs another (say, data order).
"""
from __future__ import annotations

import zlib

import numpy as np

DATA_ORDER = "data-order"
MASKING = "masking"
DROPOUT = "dropout"
BOOTSTRAP = "bootstrap"
INIT = "init"
NOISE = "noise"


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *counters: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, _name_key(name)] + [int(c) & 0xFFFFFFFF for c in counters]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
