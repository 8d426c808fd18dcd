"""Deterministic parameter initialization from a splitmix64 stream."""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of splitmix64 started at ``seed``, as uint64."""
    with np.errstate(over="ignore"):
        counters = np.uint64(seed & _MASK) + _GOLDEN * np.arange(1, n + 1, dtype=np.uint64)
        return _mix(counters)


def stream_seed(seed: int, name: str) -> int:
    """Derive an independent per-parameter seed from a run seed and a name."""
    h = 0xCBF29CE484222325  # FNV-1a 64
    for byte in name.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return int(splitmix64(seed ^ h, 1)[0])


def uniform(seed: int, name: str, shape, low: float, high: float) -> np.ndarray:
    n = int(np.prod(shape)) if len(shape) else 1
    u = (splitmix64(stream_seed(seed, name), n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return (low + (high - low) * u).reshape(shape)


def fan_in_uniform(seed: int, name: str, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return uniform(seed, name, shape, -bound, bound)
