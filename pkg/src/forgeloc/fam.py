"""Feature aggregation: edge-enhanced RGB path with dynamic convolution,
max-pooled noise path, and the concat-1x1-BN-ReLU fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.init import fan_in_uniform
from .autodiff.tensor import ContractError, DimensionError, Tensor, record
from .nn import ParamSet, bn, conv, is_grouped, linear, same_conv


@dataclass(frozen=True)
class FamConfig:
    reduction: int = 2
    dc_kernels: int = 4
    dc_temperature: float = 4.0
    mode: str = "on"            # "on" | "concat-only"
    noise_branch: bool = True

    def __post_init__(self):
        if self.dc_kernels < 1:
            raise ContractError(f"dynamic conv needs K >= 1, got {self.dc_kernels}")
        if self.mode not in ("on", "concat-only"):
            raise ContractError(f"unknown fam mode {self.mode!r}")
        if self.reduction < 1:
            raise ContractError("reduction must be >= 1")

    def reduced(self, c: int) -> int:
        return max(1, c // self.reduction)


def attention_width(cin: int) -> int:
    return max(cin // 4, 4)


# --------------------------------------------------------------------------
# dynamic convolution
# --------------------------------------------------------------------------

def build_dynamic_conv(ps: ParamSet, name: str, cin: int, cout: int, k_count: int) -> None:
    if k_count < 1:
        raise ContractError(f"dynamic conv needs K >= 1, got {k_count}")
    kernels = np.stack([fan_in_uniform(ps.seed, f"{name}.kernel{k}", (cout, cin, 3, 3), cin * 9)
                        for k in range(k_count)])
    ps.tensor(name + ".kernels", kernels)
    ps.tensor(name + ".biases", np.zeros((k_count, cout)))
    hidden = attention_width(cin)
    ps.linear(name + ".att1", cin, hidden)
    ps.linear(name + ".att2", hidden, k_count)


def kernel_attention(p, name: str, x: Tensor, temperature: float) -> Tensor:
    """Softmax weights over the K kernels, N×K, from pooled input statistics."""
    n, c = x.shape[:2]
    pooled = ops.reshape(ops.pool2d(x, "global-avg"), (n, c))
    hidden = ops.relu(linear(p, name + ".att1", pooled))
    logits = linear(p, name + ".att2", hidden)
    return ops.softmax(ops.scale(logits, 1.0 / temperature), axis=1)


def dynamic_conv(x: Tensor, p, name: str, temperature: float = 4.0, pi: Tensor | None = None) -> Tensor:
    """3×3 convolution with a per-sample kernel ``Σ_k π_k W_k`` (bias likewise).

    ``pi`` overrides the attention weights (N×K) when given.
    """
    kernels, biases = p[name + ".kernels"], p[name + ".biases"]
    k_count, cout, cin = kernels.shape[-5:-2]
    if x.shape[1] != cin:
        raise DimensionError(f"dynamic conv: input {x.shape} vs kernels {kernels.shape}")
    n = x.shape[0]
    if pi is None:
        pi = kernel_attention(p, name, x, temperature)
    if is_grouped(p):
        w_eff, b_eff = _grouped_mix(p, name, pi.data, n)
    else:
        flat = ops.reshape(kernels, (k_count, -1))
        w_eff = ops.reshape(ops.matmul(pi, flat), (n, cout, cin, 3, 3))
        b_eff = ops.matmul(pi, biases)
    return ops.conv2d(x, w_eff, b_eff, padding=1)


def _grouped_mix(p, name: str, pi: np.ndarray, n: int) -> tuple:
    kernels = p.per_sample(name + ".kernels", n)
    biases = p.per_sample(name + ".biases", n)
    w = np.matmul(pi[:, None, :], kernels.reshape(n, kernels.shape[1], -1))
    b = np.matmul(pi[:, None, :], biases)
    return Tensor(w.reshape((n,) + kernels.shape[2:])), Tensor(b[:, 0])


# --------------------------------------------------------------------------
# fixed depthwise Sobel on feature maps
# --------------------------------------------------------------------------

SOBEL_EPS = 1e-6


def feature_sobel(x: Tensor, eps: float = SOBEL_EPS) -> Tensor:
    """Per-channel Sobel magnitude ``sqrt(gx²+gy²+eps) - sqrt(eps)``, zero padded.

    The eps keeps the magnitude differentiable at flat regions while still
    mapping a zero feature map to exactly zero.
    """
    d = x.data
    p = np.pad(d, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dx = p[:, :, :, 2:] - p[:, :, :, :-2]
    gx = dx[:, :, :-2] + 2.0 * dx[:, :, 1:-1] + dx[:, :, 2:]
    dy = p[:, :, 2:, :] - p[:, :, :-2, :]
    gy = dy[:, :, :, :-2] + 2.0 * dy[:, :, :, 1:-1] + dy[:, :, :, 2:]
    s = np.sqrt(gx * gx + gy * gy + eps)
    out = s - np.sqrt(eps)

    def back(g):
        dgx = g * gx / s
        dgy = g * gy / s
        n, c, h, w = d.shape
        # adjoint of vertical [1,2,1] smoothing then horizontal central difference
        t = np.zeros((n, c, h + 2, w))
        t[:, :, :-2] += dgx
        t[:, :, 1:-1] += 2.0 * dgx
        t[:, :, 2:] += dgx
        u = np.zeros((n, c, h + 2, w + 2))
        u[:, :, :, 2:] += t
        u[:, :, :, :-2] -= t
        t = np.zeros((n, c, h, w + 2))
        t[:, :, :, :-2] += dgy
        t[:, :, :, 1:-1] += 2.0 * dgy
        t[:, :, :, 2:] += dgy
        u[:, :, 2:, :] += t
        u[:, :, :-2, :] -= t
        return (u[:, :, 1:-1, 1:-1],)

    return record("feature_sobel", out, (x,), back)


# --------------------------------------------------------------------------
# per-scale module
# --------------------------------------------------------------------------

def build_fam_scale(ps: ParamSet, prefix: str, c: int, cfg: FamConfig) -> None:
    h = cfg.reduced(c)
    if cfg.mode == "on":
        ps.conv(prefix + "rgb.reduce", c, h, 1)
        build_dynamic_conv(ps, prefix + "rgb.dyn", h, h, cfg.dc_kernels)
        ps.conv(prefix + "rgb.expand", h, c, 5)
        if cfg.noise_branch:
            ps.conv(prefix + "noise.reduce", c, h, 1)
            ps.conv(prefix + "noise.expand", h, c, 7)
    ps.conv(prefix + "fuse", 2 * c if cfg.noise_branch else c, c, 1)
    ps.bn(prefix + "fuse_bn", c)


def enhance_rgb(f: Tensor, p, prefix: str, cfg: FamConfig) -> Tensor:
    y = conv(p, prefix + "rgb.reduce", feature_sobel(f))
    y = dynamic_conv(y, p, prefix + "rgb.dyn", cfg.dc_temperature)
    y = same_conv(p, prefix + "rgb.expand", y)
    return ops.add(y, f)


def enhance_noise(f: Tensor, p, prefix: str) -> Tensor:
    y = conv(p, prefix + "noise.reduce", f)
    y = ops.pool2d(y, "max", k=3, stride=1, padding=1)
    y = same_conv(p, prefix + "noise.expand", y)
    return ops.add(y, f)


def aggregate(f_rgb: Tensor, f_n: Tensor | None, p, buffers, prefix: str, training: bool) -> Tensor:
    if f_n is not None and f_rgb.shape != f_n.shape:
        raise DimensionError(f"aggregate: rgb {f_rgb.shape} vs noise {f_n.shape}")
    x = f_rgb if f_n is None else ops.concat_channels([f_rgb, f_n])
    y = conv(p, prefix + "fuse", x)
    return ops.relu(bn(p, buffers, prefix + "fuse_bn", y, training))


def fam_forward(f_rgb: Tensor, f_n: Tensor | None, p, buffers, prefix: str, cfg: FamConfig,
                training: bool) -> Tensor:
    if cfg.mode == "on":
        f_rgb = enhance_rgb(f_rgb, p, prefix, cfg)
        if f_n is not None:
            f_n = enhance_noise(f_n, p, prefix)
    return aggregate(f_rgb, f_n, p, buffers, prefix, training)
