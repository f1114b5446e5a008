"""Deterministic derivation of independent random streams.

Every stochastic component (client sampling, negative sampling, dropout,
synthetic data) draws from a stream derived from (seed, *labels), so results
never depend on execution order or worker scheduling.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK = 0xFFFFFFFF


def _component(value) -> int:
    if isinstance(value, str):
        return zlib.crc32(value.encode("utf-8")) & _MASK
    if isinstance(value, (int, np.integer)):
        return int(value) & _MASK
    raise TypeError(f"stream labels must be int or str, got {type(value).__name__}")


def stream(seed: int, *labels) -> np.random.Generator:
    """Generator for the (seed, *labels) path; same path, same stream."""
    entropy = [_component(seed)] + [_component(x) for x in labels]
    return np.random.default_rng(entropy)
