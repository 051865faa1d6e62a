"""Stable, platform-independent seeding helpers.

Python's builtin hash() is salted per process, so anything that must be
reproducible across runs derives its RNG state from a SHA-256 digest of the
inputs instead.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts: object) -> int:
    """Derive a 128-bit integer seed from arbitrary (str/int/float) parts."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:16], "big")


def rng_for(*parts: object) -> np.random.Generator:
    """A fresh Generator whose stream is a pure function of `parts`."""
    return np.random.default_rng(stable_seed(*parts))
