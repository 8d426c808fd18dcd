"""Differentiable primitives over :class:`~forgeloc.autodiff.tensor.Tensor`.

Every function evaluates eagerly with numpy and, when an operand lives on a
graph, records a backward closure. Binary elementwise ops require equal
shapes; the only broadcast allowed is a single-element tensor acting as a
scalar factor in :func:`mul`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, record

_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = 1.0 - 2.0 ** -53


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either operand may be a one-element scalar tensor."""
    if a.shape == b.shape:
        return record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if b.size == 1:
        s = b.data.reshape(())
        return record("mul", a.data * s, (a, b),
                      lambda g: (g * s, np.sum(g * a.data).reshape(b.shape)))
    if a.size == 1:
        return mul(b, a)
    raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def offset(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("offset", x.data + c, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open-interval contract even for saturated logits
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the math name
    sign = np.sign(x.data)
    return record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def elementwise(op: str, x: Tensor, y: Tensor | None = None, c: float | None = None) -> Tensor:
    """Dispatch by name: add, mul, relu, sigmoid, abs, scale."""
    if op in ("add", "mul"):
        if y is None:
            raise ContractError(f"{op} needs two operands")
        return add(x, y) if op == "add" else mul(x, y)
    if op == "scale":
        if c is None:
            raise ContractError("scale needs a constant")
        return scale(x, c)
    unary = {"relu": relu, "sigmoid": sigmoid, "abs": abs}
    if op not in unary:
        raise ContractError(f"unknown elementwise op {op!r}")
    return unary[op](x)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate N×Ci×H×W tensors along the channel axis, preserving order."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_channels needs at least one part")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: {p.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record("concat", out, parts, back)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return record("slice", x.data[:, start:stop].copy(), (x,), back)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record("mean", np.asarray(x.data.mean()), (x,),
                  lambda g: (np.full(shape, float(g) / n),))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.graph is not None else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.graph is not None else None
        return ga, gb

    return record("matmul", out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is In×Out."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data + b.data

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        x2 = x.data.reshape(-1, w.shape[0])
        return g @ w.data.T, x2.T @ g2, g2.sum(axis=0)

    return record("linear", out, (x, w, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), back)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo))
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape, k, stride, dilation, ho, wo) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(shape)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            out[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``w`` is Cout×Cin×K×K, or N×Cout×Cin×K×K for per-sample kernels (with
    ``b`` then N×Cout). Both forms run through the same batched product.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be N×C×H×W, got {x.shape}")
    per_sample = w.ndim == 5
    if w.ndim not in (4, 5) or w.shape[-1] != w.shape[-2]:
        raise DimensionError(f"conv2d: bad kernel shape {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, k = w.shape[-4], w.shape[-3], w.shape[-1]
    if wcin != cin:
        raise DimensionError(f"conv2d: input {x.shape} has {cin} channels, kernel {w.shape} expects {wcin}")
    if per_sample and w.shape[0] != n:
        raise DimensionError(f"conv2d: per-sample kernel {w.shape} for batch {x.shape}")
    bshape = (n, cout) if per_sample else (cout,)
    if b.shape != bshape:
        raise DimensionError(f"conv2d: bias {b.shape}, expected {bshape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ContractError(f"conv2d: stride={stride} padding={padding} dilation={dilation}")
    span = dilation * (k - 1) + 1
    if h + 2 * padding < span or wd + 2 * padding < span:
        raise DimensionError(f"conv2d: input {x.shape} with padding {padding} smaller than "
                             f"dilated kernel extent {span}")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(wd, k, stride, padding, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, dilation, ho, wo)
    w2 = w.data.reshape(n, cout, -1) if per_sample else w.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    out += b.data[:, :, None] if per_sample else b.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def back(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if x.graph is not None:
            wt = np.swapaxes(w2, -1, -2)
            dcols = np.matmul(wt, g2)
            dxp = _col2im(dcols, xp.shape, k, stride, dilation, ho, wo)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if w.graph is not None:
            if per_sample:
                gw = np.matmul(g2, np.swapaxes(cols, 1, 2)).reshape(w.shape)
            else:
                gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b.graph is not None:
            gb = g2.sum(axis=2) if per_sample else g2.sum(axis=(0, 2))
        return gx, gw, gb

    return record("conv2d", out, (x, w, b), back)


# --------------------------------------------------------------------------
# pooling, normalization, resampling
# --------------------------------------------------------------------------

def pool2d(x: Tensor, mode: str, k: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    """Max / average pooling, or global average (which ignores k/stride/padding).

    Max routes the gradient to the first maximal element of each window in
    row-major scan order; average pooling counts padded zeros.
    """
    if x.ndim != 4:
        raise DimensionError(f"pool2d: input must be N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if mode == "global-avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        return record("gap", out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))
    if mode not in ("max", "avg"):
        raise ContractError(f"pool2d: unknown mode {mode!r}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"pool2d: window {k} larger than padded input {x.shape} (pad {padding})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    fill = -np.inf if mode == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=fill) if padding else x.data
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    wins = np.empty((k * k, n, c, ho, wo))
    for i in range(k):
        for j in range(k):
            wins[i * k + j] = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]

    if mode == "max":
        arg = np.argmax(wins, axis=0)
        out = np.take_along_axis(wins, arg[None], axis=0)[0]
    else:
        out = wins.mean(axis=0)

    def back(g):
        dxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                contrib = g * (arg == i * k + j) if mode == "max" else g / (k * k)
                dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += contrib
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return record(f"{mode}pool", out, (x,), back)


def _channel_mean(x: np.ndarray, axes) -> np.ndarray:
    # anchor on the first element of each channel so constant channels are exact
    anchor = x[(0, slice(None)) + (0,) * (x.ndim - 2)]
    shape = (1, -1) + (1,) * (x.ndim - 2)
    anchor = anchor.reshape(shape)
    return anchor + (x - anchor).mean(axis=axes, keepdims=True)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, eps: float = 1e-5,
               momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over N×C[×H×W].

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance); in eval mode the
    running statistics are used.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    gam = gamma.data.reshape(shape)
    if training:
        mu = _channel_mean(x.data, axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        xc = x.data - running_mean.reshape(shape)
        var = running_var.reshape(shape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gam * xhat + beta.data.reshape(shape)

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gam
        if training:
            gx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = dxhat * inv
        return gx, gg, gb

    return record("batchnorm", out, (x, gamma, beta), back)


def interp_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """Row-stochastic n_out×n_in resampling matrix (half-pixel centres)."""
    a = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum((rows * n_in) // n_out, n_in - 1)
        a[rows, src] = 1.0
        return a
    if mode != "bilinear":
        raise ContractError(f"unknown interpolation mode {mode!r}")
    src = np.maximum((rows + 0.5) * (n_in / n_out) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    np.add.at(a, (rows, i0), 1.0 - lam)
    np.add.at(a, (rows, i1), lam)
    return a


def upsample(x: Tensor, size: tuple, mode: str = "bilinear") -> Tensor:
    """Resize N×C×H×W to N×C×H'×W'; nearest replicates exact values."""
    ho, wo = size
    if ho < 1 or wo < 1:
        raise ContractError(f"upsample: target size {size} must be positive")
    h, w = x.shape[2:]
    ah = interp_matrix(h, ho, mode)
    aw = interp_matrix(w, wo, mode)
    if mode == "nearest":
        ih = ah.argmax(axis=1)
        iw = aw.argmax(axis=1)
        out = x.data[:, :, ih[:, None], iw[None, :]]
    else:
        out = np.matmul(np.matmul(ah, x.data), aw.T)

    def back(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return record(f"upsample_{mode}", out, (x,), back)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def binary_cross_entropy(p: Tensor, target: Tensor, clamp: float = 1e-7) -> Tensor:
    """Mean of −[t·ln p + (1−t)·ln(1−p)] with p clamped to [clamp, 1−clamp]."""
    _check_same("binary_cross_entropy", p, target)
    pc = np.clip(p.data, clamp, 1.0 - clamp)
    t = target.data
    n = p.size
    loss = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean()
    inside = (p.data >= clamp) & (p.data <= 1.0 - clamp)

    def back(g):
        gp = float(g) / n * (pc - t) / (pc * (1.0 - pc)) * inside
        return gp, None

    return record("bce", np.asarray(loss), (p, target), back)
