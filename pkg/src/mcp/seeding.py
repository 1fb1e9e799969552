"""Splittable, counter-based random streams.

Every random decision in the pipeline draws from a named substream of one
master seed, so reproducibility never depends on execution order. Streams
are Philox generators keyed by a stable hash of (master, *tags).
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(master: int, *tags) -> int:
    """Stable 128-bit key for (master, tags). Tags may be ints or strings."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"\x00")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit sub-seed, for APIs that take a plain integer seed."""
    return derive_key(master, *tags) & 0x7FFF_FFFF_FFFF_FFFF


def substream(master: int, *tags) -> np.random.Generator:
    """Independent generator for the named substream of `master`."""
    return np.random.Generator(np.random.Philox(key=derive_key(master, *tags)))
