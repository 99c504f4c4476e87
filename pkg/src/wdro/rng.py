"""Seed derivation: every consumer gets its own stream from (seed, label)."""

import zlib

import numpy as np


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))
