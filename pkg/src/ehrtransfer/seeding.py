"""Derivation of independent per-stage seed streams from one global seed.

``derive_seed(global_seed, "pretrain", 3)`` feeds the global seed as entropy
and the CRC32 of each key (stringified) as the spawn key of a numpy
``SeedSequence``, then takes its first 32-bit word.  Any stage can thus be
rerun on its own and draw exactly the numbers it drew in a full run.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(global_seed: int, *keys) -> int:
    spawn = tuple(zlib.crc32(str(k).encode("utf-8")) for k in keys)
    seq = np.random.SeedSequence(entropy=int(global_seed), spawn_key=spawn)
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def rng_for(global_seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, *keys))
