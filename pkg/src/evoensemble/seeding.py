"""Seed derivation.

Every random stream in a run is derived from a single master seed plus a
label path, e.g. ``derive_seed(master, "fitness", (0, 3, 7))``. The mapping is
a SHA-256 over the canonical ``repr`` of the parts, so it is stable across
processes and Python versions (unlike ``hash``).
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts: object) -> int:
    """Return a 63-bit seed determined by ``master`` and ``parts``."""
    payload = repr((int(master),) + tuple(_canonical(p) for p in parts))
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def derive_rng(master: int, *parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))


def _canonical(part: object) -> object:
    if isinstance(part, (list, tuple)):
        return tuple(_canonical(p) for p in part)
    if isinstance(part, np.integer):
        return int(part)
    return part
