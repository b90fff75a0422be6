"""Deterministic named RNG streams derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Independent Generator for (master_seed, name), stable across runs."""
    digest = hashlib.sha256(f"{master_seed}/{name}".encode()).digest()
    entropy = int.from_bytes(digest[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))
