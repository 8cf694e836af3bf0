"""Deterministic random-stream derivation.

Every stochastic routine in this package takes one master seed.  Per-unit
streams are derived by hashing (seed, unit_id) so that work distributed over
units produces byte-identical results regardless of execution order.
"""

import hashlib

import numpy as np


def stable_id_hash(unit_id: str) -> int:
    """64-bit integer digest of a unit id, stable across processes."""
    digest = hashlib.sha256(unit_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def master_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def unit_rng(seed: int, unit_id: str) -> np.random.Generator:
    """Generator for one unit, independent of the order units are processed."""
    ss = np.random.SeedSequence([int(seed), stable_id_hash(unit_id)])
    return np.random.default_rng(ss)


def substream(seed: int, label: str) -> np.random.Generator:
    """Named substream of the master seed (e.g. 'params', 'schedule')."""
    ss = np.random.SeedSequence([int(seed), stable_id_hash(label)])
    return np.random.default_rng(ss)
