"""Deterministic randomness helpers.

Two kinds of streams are used.  Structured draws (initial noise, ancestral
steps) come from numpy Generators derived per (seed, purpose, step) so any
step can be re-derived without replaying the chain.  Per-pixel jitter for
stratified ray sampling uses a counter-based splitmix64 hash, which makes
renders independent of pixel traversal order.
"""

from __future__ import annotations

import os

import numpy as np

_C1 = np.uint64(0x9E3779B97F4A7C15)
_C2 = np.uint64(0xBF58476D1CE4E5B9)
_C3 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _C2
    z = (z ^ (z >> np.uint64(27))) * _C3
    return z ^ (z >> np.uint64(31))


def hash_u64(*parts) -> np.ndarray:
    """splitmix64-style hash of broadcast uint64 parts."""
    with np.errstate(over="ignore"):
        acc = np.uint64(0x243F6A8885A308D3)
        for p in parts:
            arr = np.asarray(p, dtype=np.uint64)
            acc = _mix((acc + _C1) ^ _mix(arr + _C1))
        return acc


def uniform01(*parts) -> np.ndarray:
    """Deterministic uniforms in [0, 1) keyed by the hashed parts."""
    bits = hash_u64(*parts) >> np.uint64(11)  # keep 53 bits
    return bits.astype(np.float64) * (1.0 / 9007199254740992.0)


def step_rng(seed: int, *key: int) -> np.random.Generator:
    """Fresh Generator for a (seed, purpose..., step) coordinate."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def worker_count() -> int:
    """Worker cap from BIDIFF_THREADS (default 1; floor 1)."""
    raw = os.environ.get("BIDIFF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
