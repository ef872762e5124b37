"""Shared helpers for hashing payloads, deriving seeds, and random substreams."""

from __future__ import annotations

import hashlib
from typing import Any

import numpy as np
import orjson

# Substream lanes inside one bootstrap replicate.
LANE_COVARIATE = 0
LANE_RANDOM_EFFECT = 1
LANE_SAMPLING_ERROR = 2
LANE_RESTRICTED = 3


def hash_payload(payload: dict[str, Any]) -> str:
    raw = orjson.dumps(payload, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    return hashlib.sha1(raw).hexdigest()[:16]


def stable_seed(value: str) -> int:
    """Map a text key to a reproducible 64-bit seed."""
    digest = hashlib.sha1(value.encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """
    Counter-based generator for a (replicate, lane, ...) coordinate.

    The same (master_seed, key) always yields the same stream, independent of
    which worker thread asks for it.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)


def percentile_interval(values: np.ndarray, level: float, axis: int = 0) -> tuple[Any, Any]:
    alpha = 1.0 - level
    lower = np.quantile(values, alpha / 2.0, axis=axis, method="linear")
    upper = np.quantile(values, 1.0 - alpha / 2.0, axis=axis, method="linear")
    return lower, upper


__all__ = [
    "LANE_COVARIATE",
    "LANE_RANDOM_EFFECT",
    "LANE_SAMPLING_ERROR",
    "LANE_RESTRICTED",
    "hash_payload",
    "stable_seed",
    "substream",
    "percentile_interval",
]
