"""Small shared utilities for the test modules."""

import numpy as np

from forgeloc.autodiff import Tensor


def consts(params):
    return {k: Tensor(v) for k, v in params.items()}


def rand(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


def randomize(params, seed, scale=0.3):
    """Copy of ``params`` with every zero-initialized entry filled with noise,
    so biases and offsets take part in gradient checks."""
    r = np.random.default_rng(seed)
    out = {}
    for k, v in params.items():
        out[k] = v + scale * r.normal(size=v.shape) if not np.any(v) else v.copy()
    return out
