"""Seeded random streams.

All randomness goes through ``make_rng``. Philox is counter-based and NumPy
keeps its bit stream stable across platforms, so a seed fully determines a run.
Independent consumers (weight init, sampling, shuffling, speckle) take separate
named sub-streams so that adding draws in one place never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    key = [int(seed)]
    if stream is not None:
        key.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
