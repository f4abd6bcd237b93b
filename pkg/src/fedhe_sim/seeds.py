"""Seed derivation: every random stream in an experiment hangs off one root seed.

Streams are keyed by (root, purpose, index) so that e.g. adding an eleventh
client leaves the first ten clients' streams untouched.
"""
from __future__ import annotations

import zlib

import numpy as np


def seed_sequence(root: int, purpose: str, index: int | None = None) -> np.random.SeedSequence:
    if root < 0:
        raise ValueError(f"root seed must be non-negative, got {root}")
    entropy = [root, zlib.crc32(purpose.encode("utf-8"))]
    if index is not None:
        entropy.append(index)
    return np.random.SeedSequence(entropy)


def derive_rng(root: int, purpose: str, index: int | None = None) -> np.random.Generator:
    """Deterministic generator for one (root, purpose, index) stream."""
    return np.random.default_rng(seed_sequence(root, purpose, index))


def derive_seed(root: int, purpose: str, index: int | None = None) -> int:
    """Collapse a stream key to a plain integer seed (for APIs that take one)."""
    return int(seed_sequence(root, purpose, index).generate_state(1)[0])
