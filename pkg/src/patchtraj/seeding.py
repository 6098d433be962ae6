"""Deterministic named random substreams.

All randomness in the package flows from one root seed through named
substreams so that results are reproducible and independent of thread
scheduling.  Stream names are hashed with crc32 (stable across processes,
unlike ``hash``).
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_u32(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator for the substream of ``seed`` addressed by ``tags``.

    The same (seed, tags) always yields the same stream; distinct tag
    tuples yield statistically independent streams.
    """
    key = tuple(_tag_to_u32(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def stream_seed(seed: int, *tags) -> int:
    """A derived integer seed, for APIs that take a seed rather than a rng."""
    return int(substream(seed, *tags).integers(0, 2**63 - 1))
