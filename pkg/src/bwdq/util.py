"""Small helpers shared by several modules."""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _plain(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))
