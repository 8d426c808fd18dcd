"""Atrous residual pyramid: pooled, 1×1 and three dilated branches concatenated
with the input and fused back to the input width."""

from __future__ import annotations

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .nn import ParamSet, conv

DILATIONS = (6, 12, 18)


def branch_width(c: int, ratio: float = 0.5) -> int:
    return max(1, int(c * ratio))


def effective_dilation(d: int, h: int, w: int) -> int:
    """Clamp a dilation so the dilated taps still reach inside a small map."""
    extent = max(h, w)
    if extent <= d:
        return max(1, min(d, extent - 1))
    return d


def build_arpm_scale(ps: ParamSet, prefix: str, c: int, cb: int) -> None:
    ps.conv(prefix + "gap", c, cb, 1)
    ps.conv(prefix + "local", c, cb, 1)
    for d in DILATIONS:
        ps.conv(f"{prefix}atrous{d}", c, cb, 3)
    ps.conv(prefix + "fuse", c + 5 * cb, c, 1)
    # the input's own columns start as the identity so the module begins as a
    # residual pass-through; the branch columns keep their random init
    ps.params[prefix + "fuse.w"][:, :c, 0, 0] = np.eye(c)


def arpm_branches(f: Tensor, p, prefix: str) -> list:
    """The six tensors concatenated before fusion, in order."""
    n, c, h, w = f.shape
    pooled = conv(p, prefix + "gap", ops.pool2d(f, "global-avg"))
    f_avg = ops.upsample(pooled, (h, w), mode="nearest")
    f_1x1 = conv(p, prefix + "local", f)
    parts = [f, f_avg, f_1x1]
    for d in DILATIONS:
        de = effective_dilation(d, h, w)
        parts.append(conv(p, f"{prefix}atrous{d}", f, padding=de, dilation=de))
    return parts


def arpm_forward(f: Tensor, p, prefix: str) -> Tensor:
    return conv(p, prefix + "fuse", ops.concat_channels(arpm_branches(f, p, prefix)))
