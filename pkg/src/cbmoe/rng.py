"""Named, independent random substreams derived from one root seed.

Every source of randomness in the package (cohort synthesis, splits,
parameter init, perturbation noise, subsampling, dropout, probe batches)
draws from its own substream so that components are reproducible in
isolation and adding one consumer never shifts another's draws.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    raise TypeError(f"substream key parts must be str or int, got {type(part)!r}")


def substream(seed: int, *parts) -> np.random.Generator:
    """Generator for the substream named by `parts` under the root `seed`."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
