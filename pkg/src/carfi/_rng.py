"""Deterministic seed derivation helpers.

Replicated work (trees, simulation runs) uses spawned SeedSequences so
results do not depend on scheduling. Per-instance sampling streams are
keyed by the instance's cell contents, which makes importance estimates
invariant under row reordering and safe to parallelize.
"""

from __future__ import annotations

import hashlib

import numpy as np


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def spawn_seeds(seed: int, n: int) -> list[int]:
    """Derive n independent integer seeds from a master seed."""
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def row_keyed_rng(seed: int, row: np.ndarray, tag: bytes = b"") -> np.random.Generator:
    """RNG stream keyed by (seed, row contents); independent of row position."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(16, "little", signed=True))
    h.update(tag)
    h.update(np.ascontiguousarray(row, dtype=np.float64).tobytes())
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


def row_order_key(seed: int, rows: np.ndarray) -> np.ndarray:
    """Content-based canonical ordering of rows (stable under shuffling)."""
    keys = np.empty(len(rows), dtype=np.uint64)
    salt = int(seed).to_bytes(16, "little", signed=True)
    for i, row in enumerate(rows):
        h = hashlib.blake2b(digest_size=8)
        h.update(salt)
        h.update(np.ascontiguousarray(row, dtype=np.float64).tobytes())
        keys[i] = int.from_bytes(h.digest(), "little")
    return np.argsort(keys, kind="stable")
