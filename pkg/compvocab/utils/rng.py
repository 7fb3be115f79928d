"""Deterministic per-stage random generators forked from the global seed."""

from __future__ import annotations

import zlib

import numpy as np


def fork_rng(seed: int, stage: str) -> np.random.Generator:
    """Same (seed, stage) always yields the same stream; stages never share one."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]))
