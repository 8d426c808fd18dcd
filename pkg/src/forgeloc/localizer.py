"""Spatial-channel correlation heads, progressive mask chain and the loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ContractError, DimensionError, Tensor
from .nn import ParamSet, conv, linear, same_conv


@dataclass
class MaskSet:
    """Masks ``M1..M4`` ordered coarse to fine; ``final`` is ``M4``."""

    masks: list

    def __post_init__(self):
        if len(self.masks) != 4:
            raise ContractError(f"expected 4 masks, got {len(self.masks)}")

    @property
    def final(self) -> Tensor:
        return self.masks[-1]

    def __getitem__(self, i: int) -> Tensor:
        """1-based access: ``ms[4]`` is the final mask."""
        return self.masks[i - 1]


# --------------------------------------------------------------------------
# reshape to tokens
# --------------------------------------------------------------------------

def sccm_reshape(x: Tensor, r: int) -> Tensor:
    """N×C×H×W -> N×(HW/r²)×(C·r²), moving each r×r block into the features."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ContractError(f"reshape factor {r} does not divide {h}×{w}")
    y = ops.reshape(x, (n, c, h // r, r, w // r, r))
    y = ops.transpose(y, (0, 2, 4, 1, 3, 5))
    return ops.reshape(y, (n, (h // r) * (w // r), c * r * r))


def sccm_unreshape(t: Tensor, shape: tuple, r: int) -> Tensor:
    n, c, h, w = shape
    y = ops.reshape(t, (n, h // r, w // r, c, r, r))
    y = ops.transpose(y, (0, 3, 1, 4, 2, 5))
    return ops.reshape(y, (n, c, h, w))


# --------------------------------------------------------------------------
# correlation module
# --------------------------------------------------------------------------

def build_sccm(ps: ParamSet, prefix: str, c: int, r: int) -> None:
    d = c * r * r
    for name in ("g", "theta", "phi"):
        ps.linear(prefix + name, d, d)
    ps.conv(prefix + "k_s", c, c, 1)
    ps.conv(prefix + "k_c", c, c, 1)
    ps.tensor(prefix + "alpha", np.zeros(1))


def attention_maps(x: Tensor, p, prefix: str, r: int):
    """Return ``(m_s, m_c, A_s, A_c)`` with the attention outputs as N×C×H×W."""
    tokens = sccm_reshape(x, r)
    xg = linear(p, prefix + "g", tokens)
    xt = linear(p, prefix + "theta", tokens)
    xp = linear(p, prefix + "phi", tokens)
    m_s = ops.softmax(ops.matmul(xt, ops.transpose(xp, (0, 2, 1))), axis=-1)
    m_c = ops.softmax(ops.matmul(ops.transpose(xt, (0, 2, 1)), xt), axis=-1)
    a_s = sccm_unreshape(ops.matmul(m_s, xg), x.shape, r)
    a_c = sccm_unreshape(ops.matmul(xg, m_c), x.shape, r)
    return m_s, m_c, a_s, a_c


def mixing_weights(p, prefix: str):
    """``(s, c)`` with ``s = sigmoid(alpha)`` and ``c = 1 - s``."""
    alpha = p[prefix + "alpha"]
    s = ops.sigmoid(alpha if isinstance(alpha, Tensor) else Tensor(alpha))
    return s, ops.offset(ops.scale(s, -1.0), 1.0)


def _weigh(a: Tensor, w: Tensor) -> Tensor:
    if w.size == 1:
        return ops.mul(a, w)
    # grouped evaluation: one weight per group, broadcast over its samples
    g = w.shape[0]
    out = a.data.reshape((g, -1) + a.shape[1:]) * w.data.reshape((g,) + (1,) * a.ndim)
    return Tensor(out.reshape(a.shape))


def sccm_forward(x: Tensor, p, prefix: str, r: int) -> Tensor:
    _, _, a_s, a_c = attention_maps(x, p, prefix, r)
    s, c = mixing_weights(p, prefix)
    out = ops.add(x, _weigh(conv(p, prefix + "k_s", a_s), s))
    return ops.add(out, _weigh(conv(p, prefix + "k_c", a_c), c))


# --------------------------------------------------------------------------
# mask head and progressive chain
# --------------------------------------------------------------------------

def head_width(c: int) -> int:
    return max(1, c // 2)


# forged pixels are a small minority; starting the output at this prior skips
# the early phase where every logit is pushed down from 0.5
HEAD_PRIOR = 0.05


def build_head(ps: ParamSet, prefix: str, c: int) -> None:
    ps.conv(prefix + "head1", c, head_width(c), 3)
    ps.conv(prefix + "head2", head_width(c), 1, 3)
    ps.params[prefix + "head2.b"][:] = np.log(HEAD_PRIOR / (1.0 - HEAD_PRIOR))


def predict_mask(f: Tensor, p, prefix: str) -> Tensor:
    y = ops.relu(same_conv(p, prefix + "head1", f))
    return ops.sigmoid(same_conv(p, prefix + "head2", y))


def build_localizer(ps: ParamSet, channels, ratios) -> None:
    """One correlation module + head per scale; scales 1-3 also get a prior projection."""
    for i, (c, r) in enumerate(zip(channels, ratios), start=1):
        prefix = f"loc{i}."
        build_sccm(ps, prefix + "sccm.", c, r)
        build_head(ps, prefix, c)
        if i < len(channels):
            ps.conv(prefix + "prior", 1, c, 1)


def progressive_localize(features: list, p, ratios) -> MaskSet:
    """Run the mask heads from the coarsest scale to the finest.

    Each finer scale receives the previous mask, bilinearly resized and
    projected by a 1×1 conv, added to its features before correlation.
    """
    if len(features) != 4 or any(f is None for f in features):
        raise ContractError("progressive localization needs all four scales")
    masks = []
    prev = None
    for i in range(4, 0, -1):
        x = features[i - 1]
        prefix = f"loc{i}."
        if prev is not None:
            prior = ops.upsample(prev, x.shape[2:], mode="bilinear")
            x = ops.add(x, conv(p, prefix + "prior", prior))
        f = sccm_forward(x, p, prefix + "sccm.", ratios[i - 1])
        prev = predict_mask(f, p, prefix)
        masks.append(prev)
    return MaskSet(masks)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def downsample_mask(gt: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour downsampling of an N×1×H×W binary mask."""
    H, W = gt.shape[-2:]
    ih = np.minimum((np.arange(h) * H) // h, H - 1)
    iw = np.minimum((np.arange(w) * W) // w, W - 1)
    return gt[..., ih[:, None], iw[None, :]]


def bce_loss(m: Tensor, g: Tensor) -> Tensor:
    if m.shape != g.shape:
        raise DimensionError(f"bce_loss: prediction {m.shape} vs ground truth {g.shape}")
    return ops.binary_cross_entropy(m, g, clamp=1e-7)


def ground_truth_pyramid(gt: np.ndarray, masks: MaskSet) -> list:
    return [downsample_mask(gt, *m.shape[2:]) for m in masks.masks]


def total_loss(masks: MaskSet, gt: np.ndarray) -> Tensor:
    """Unweighted sum of the four per-scale BCE terms; ``gt`` is N×1×H×W."""
    losses = [bce_loss(m, Tensor(g)) for m, g in zip(masks.masks, ground_truth_pyramid(gt, masks))]
    total = losses[0]
    for term in losses[1:]:
        total = ops.add(total, term)
    return total
