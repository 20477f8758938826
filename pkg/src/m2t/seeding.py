"""Deterministic named substreams derived from one root seed.

Every source of randomness in a run (weight init, dataset synthesis,
epoch shuffles, per-iteration augmentation, queue init, probe splits)
draws from its own substream so that runs are reproducible bit for bit
and unrelated consumers never perturb each other's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    raise TypeError(f"substream path parts must be str or int, got {type(part)}")


def substream(root_seed: int, *path) -> np.random.Generator:
    """Generator for the (root, path...) substream."""
    entropy = [int(root_seed) & 0xFFFFFFFF] + [_encode(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_int(root_seed: int, *path) -> int:
    """A stable 63-bit integer seed for APIs that take plain seeds."""
    return int(substream(root_seed, *path).integers(0, 2**63 - 1))
