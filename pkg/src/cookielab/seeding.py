"""Deterministic seed derivation for replicate-parallel experiments.

Replicates are processed in fixed-size chunks.  Chunk ``c`` of experiment
``name`` under master seed ``s`` always receives the same generator state, so
results are independent of worker count and scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np

CHUNK = 2048


def experiment_id(name: str) -> int:
    """Stable 64-bit id of an experiment name (sha256 prefix)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def chunk_seed(master_seed: int, name: str, chunk_index: int) -> np.random.SeedSequence:
    """Seed sequence mixing (master seed, experiment id, chunk index)."""
    return np.random.SeedSequence([master_seed, experiment_id(name), chunk_index])


def chunk_rng(master_seed: int, name: str, chunk_index: int) -> np.random.Generator:
    return np.random.default_rng(chunk_seed(master_seed, name, chunk_index))


def chunk_sizes(total: int, chunk: int = CHUNK) -> list[int]:
    """Split ``total`` replicates into fixed chunks (last may be short)."""
    if total < 0:
        raise ValueError("total must be nonnegative")
    out = []
    left = total
    while left > 0:
        take = min(chunk, left)
        out.append(take)
        left -= take
    return out
