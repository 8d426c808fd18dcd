"""Parameter construction and layer helpers shared by the network modules.

Parameters live in flat ``name -> ndarray`` dicts; a forward pass receives
the same names mapped to tensors (graph leaves when training, constants when
evaluating). BatchNorm running statistics are kept separately as buffers.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ops
from .autodiff.init import fan_in_uniform
from .autodiff.tensor import Tensor


class ParamSet:
    """Accumulates named parameters and buffers with seeded initialization."""

    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = value

    def conv(self, name: str, cin: int, cout: int, k: int) -> None:
        self._add(name + ".w", fan_in_uniform(self.seed, name + ".w", (cout, cin, k, k), cin * k * k))
        self._add(name + ".b", np.zeros(cout))

    def linear(self, name: str, fin: int, fout: int) -> None:
        self._add(name + ".w", fan_in_uniform(self.seed, name + ".w", (fin, fout), fin))
        self._add(name + ".b", np.zeros(fout))

    def bn(self, name: str, c: int) -> None:
        self._add(name + ".gamma", np.ones(c))
        self._add(name + ".beta", np.zeros(c))
        self.buffers[name + ".running_mean"] = np.zeros(c)
        self.buffers[name + ".running_var"] = np.ones(c)

    def tensor(self, name: str, value: np.ndarray) -> None:
        self._add(name, np.asarray(value, dtype=np.float64))


class GroupedParams(dict):
    """Parameters stacked along a leading group axis of size ``groups``.

    Used to evaluate many parameter variants in one constant (graph-free)
    pass: activations carry ``groups * n`` samples in group-major order and
    every layer applies group ``g``'s parameters to samples ``g*n .. g*n+n-1``.
    """

    def __init__(self, arrays: dict, groups: int):
        super().__init__(arrays)
        self.groups = groups

    def per_sample(self, name: str, batch: int) -> np.ndarray:
        """Parameter ``name`` repeated so each sample gets its group's copy."""
        return np.repeat(self[name], batch // self.groups, axis=0)


def is_grouped(p) -> bool:
    return isinstance(p, GroupedParams)


def conv(p, name, x, stride=1, padding=0, dilation=1):
    if is_grouped(p):
        n = x.shape[0]
        w, b = Tensor(p.per_sample(name + ".w", n)), Tensor(p.per_sample(name + ".b", n))
    else:
        w, b = p[name + ".w"], p[name + ".b"]
    return ops.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)


def same_conv(p, name, x, dilation=1):
    """Stride-1 conv whose zero padding keeps the spatial size (odd kernels)."""
    k = p[name + ".w"].shape[-1]
    return conv(p, name, x, padding=dilation * (k - 1) // 2, dilation=dilation)


def linear(p, name, x):
    if is_grouped(p):
        g = p.groups
        w, b = p[name + ".w"], p[name + ".b"]
        xs = x.data.reshape(g, -1, w.shape[1])
        out = np.matmul(xs, w) + b[:, None, :]
        return Tensor(out.reshape(x.shape[:-1] + (w.shape[2],)))
    return ops.linear(x, p[name + ".w"], p[name + ".b"])


def grouped_bn(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, mean: np.ndarray,
               var: np.ndarray, groups: int, training: bool, eps: float = 1e-5) -> np.ndarray:
    """Batch norm with statistics taken per group (no running-stat update)."""
    n, c = x.shape[:2]
    xg = x.reshape((groups, n // groups) + x.shape[1:])
    shape = (groups, 1, c) + (1,) * (x.ndim - 2)
    axes = (1,) + tuple(range(3, xg.ndim))
    if training:
        anchor = xg[:, :1, :, :1, :1] if x.ndim == 4 else xg[:, :1]
        mu = anchor + (xg - anchor).mean(axis=axes, keepdims=True)
        xc = xg - mu
        v = (xc * xc).mean(axis=axes, keepdims=True)
    else:
        xc = xg - mean.reshape((1, 1, c) + (1,) * (x.ndim - 2))
        v = var.reshape((1, 1, c) + (1,) * (x.ndim - 2))
    out = gamma.reshape(shape) * (xc / np.sqrt(v + eps)) + beta.reshape(shape)
    return out.reshape(x.shape)


def bn(p, buffers, name, x, training: bool):
    if is_grouped(p):
        return Tensor(grouped_bn(x.data, p[name + ".gamma"], p[name + ".beta"],
                                 buffers[name + ".running_mean"], buffers[name + ".running_var"],
                                 p.groups, training))
    return ops.batch_norm(x, p[name + ".gamma"], p[name + ".beta"],
                          buffers[name + ".running_mean"], buffers[name + ".running_var"],
                          training=training)


def conv_bn_relu(p, buffers, name, x, training, stride=1):
    k = p[name + ".conv.w"].shape[-1]
    y = conv(p, name + ".conv", x, stride=stride, padding=(k - 1) // 2)
    return ops.relu(bn(p, buffers, name + ".bn", y, training))
