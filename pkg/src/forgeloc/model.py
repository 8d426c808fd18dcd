"""End-to-end localization network: two backbones, per-scale aggregation and
pyramid modules, and the progressive mask chain."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import imgproc
from .arpm import arpm_forward, branch_width, build_arpm_scale
from .autodiff import checkpoint
from .autodiff.tensor import ContractError, DimensionError, Graph, Tensor
from .backbone import BackboneConfig, build_backbone, extract_features
from .fam import FamConfig, build_fam_scale, fam_forward
from .localizer import MaskSet, build_localizer, progressive_localize, total_loss
from .metrics import resize_mask
from .nn import ParamSet

NOISE_MODES = ("guided", "gf", "sobel", "off")


@dataclass
class ModelConfig:
    input_size: int = 64
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    gf_r: int = 2
    gf_eps: float = 1e-4
    dc_kernels: int = 4
    dc_temperature: float = 4.0
    reduction: int = 2
    arpm_ratio: float = 0.5
    sccm_ratios: tuple = (2, 2, 2, 1)
    noise_branch: str = "guided"
    fam: str = "on"
    arpm: str = "on"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.sccm_ratios = tuple(int(r) for r in self.sccm_ratios)
        if self.noise_branch not in NOISE_MODES:
            raise ContractError(f"noise_branch must be one of {NOISE_MODES}, got {self.noise_branch!r}")
        if self.arpm not in ("on", "off"):
            raise ContractError(f"arpm must be on or off, got {self.arpm!r}")
        if len(self.sccm_ratios) != 4:
            raise ContractError("sccm_ratios needs one factor per scale")
        self.backbone  # validates sizes and widths
        self.fam_config  # validates the aggregation settings
        for i, r in enumerate(self.sccm_ratios):
            side = self.input_size >> (i + 1)
            if r < 1 or side % r:
                raise ContractError(f"sccm ratio {r} does not divide the scale-{i + 1} side {side}")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(stage_channels=self.stage_channels,
                              blocks_per_stage=self.blocks_per_stage,
                              input_size=self.input_size)

    @property
    def fam_config(self) -> FamConfig:
        return FamConfig(reduction=self.reduction, dc_kernels=self.dc_kernels,
                         dc_temperature=self.dc_temperature, mode=self.fam,
                         noise_branch=self.noise_branch != "off")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Preprocessed network inputs: RGB and noise tensors plus masks (N×1×S×S)."""

    rgb: np.ndarray
    noise: Optional[np.ndarray]
    masks: Optional[np.ndarray] = None

    def take(self, idx) -> "Batch":
        return Batch(self.rgb[idx], None if self.noise is None else self.noise[idx],
                     None if self.masks is None else self.masks[idx])


def noise_image(image: imgproc.Image, mode: str, r: int, eps: float) -> np.ndarray:
    """The noise-branch input for one image, H×W×3."""
    res = imgproc.guided_noise(image, r=r, eps=eps)
    if mode == "guided":
        return res.guided_noise.data
    if mode == "gf":
        return res.residual.data
    if mode == "sobel":
        return res.edges.data
    raise ContractError(f"no noise input for mode {mode!r}")


class ForgeryNet:
    """Parameters, BatchNorm buffers and the forward pass of the localizer.

    ``params`` and ``buffers`` are plain dicts of arrays; a forward pass takes
    the parameters as tensors so the same code serves training (graph leaves)
    and inference (constants).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        ps = ParamSet(seed)
        bcfg, fcfg = cfg.backbone, cfg.fam_config
        build_backbone(bcfg, ps, "rgb.")
        if cfg.noise_branch != "off":
            build_backbone(bcfg, ps, "noise.")
        for i, c in enumerate(cfg.stage_channels, start=1):
            build_fam_scale(ps, f"fam.scale{i}.", c, fcfg)
            if cfg.arpm == "on":
                build_arpm_scale(ps, f"arpm.scale{i}.", c, branch_width(c, cfg.arpm_ratio))
        build_localizer(ps, cfg.stage_channels, cfg.sccm_ratios)
        self.params = ps.params
        self.buffers = ps.buffers

    # ------------------------------------------------------------------ io
    def prepare(self, images, masks=None) -> Batch:
        """Stack images (and optional H×W masks) into network-ready arrays."""
        s = self.cfg.input_size
        rgb, noise = [], []
        for im in images:
            if (im.height, im.width) != (s, s):
                raise DimensionError(f"model expects {s}×{s} images, got {im.height}×{im.width}")
            rgb.append(im.data.transpose(2, 0, 1))
            if self.cfg.noise_branch != "off":
                n = noise_image(im, self.cfg.noise_branch, self.cfg.gf_r, self.cfg.gf_eps)
                noise.append(n.transpose(2, 0, 1))
        gt = None
        if masks is not None:
            gt = np.stack([np.asarray(m, dtype=np.float64) for m in masks])[:, None]
        return Batch(np.ascontiguousarray(np.stack(rgb)),
                     np.ascontiguousarray(np.stack(noise)) if noise else None, gt)

    # ------------------------------------------------------------- forward
    def features(self, p: dict, batch: Batch, training: bool) -> tuple:
        """Backbone pyramids ``(f_rgb, f_n)``; ``f_n`` is all None without a noise branch."""
        bcfg = self.cfg.backbone
        f_rgb = extract_features(p, self.buffers, Tensor(batch.rgb), bcfg, "rgb.", training)
        if self.cfg.noise_branch == "off":
            return f_rgb, [None] * 4
        return f_rgb, extract_features(p, self.buffers, Tensor(batch.noise), bcfg, "noise.", training)

    def scale_features(self, p: dict, i: int, f_rgb: Tensor, f_n: Optional[Tensor],
                       training: bool) -> Tensor:
        """Aggregation (and pyramid module, if enabled) at scale ``i`` in 1..4."""
        x = fam_forward(f_rgb, f_n, p, self.buffers, f"fam.scale{i}.", self.cfg.fam_config, training)
        if self.cfg.arpm == "on":
            x = arpm_forward(x, p, f"arpm.scale{i}.")
        return x

    def localize(self, p: dict, xs: list) -> MaskSet:
        return progressive_localize(xs, p, self.cfg.sccm_ratios)

    def forward(self, p: dict, batch: Batch, training: bool) -> MaskSet:
        f_rgb, f_n = self.features(p, batch, training)
        xs = [self.scale_features(p, i + 1, f_rgb[i], f_n[i], training) for i in range(4)]
        return self.localize(p, xs)

    def loss(self, p: dict, batch: Batch, training: bool = True) -> Tensor:
        return total_loss(self.forward(p, batch, training), batch.masks)

    def loss_and_grads(self, batch: Batch, check_finite: bool = False):
        """One training-mode forward/backward; returns ``(loss, grads)``."""
        graph = Graph(check_finite=check_finite)
        leaves = graph.leaves_from(self.params)
        loss = self.loss(leaves, batch, training=True)
        return loss.item(), graph.backward(loss)

    def constants(self) -> dict:
        return {k: Tensor(v) for k, v in self.params.items()}

    def predict_batch(self, batch: Batch) -> np.ndarray:
        """Final (finest) masks in eval mode, N×h×w."""
        return self.forward(self.constants(), batch, training=False).final.data[:, 0]

    def predict(self, image: imgproc.Image) -> np.ndarray:
        return self.predict_batch(self.prepare([image]))[0]

    def predict_full(self, image: imgproc.Image) -> np.ndarray:
        """Final mask bilinearly resized to the image resolution."""
        m = self.predict(image)
        return resize_mask(m, image.height, image.width)

    # ---------------------------------------------------------- persistence
    def state_dict(self) -> dict:
        out = dict(self.params)
        out.update(self.buffers)
        return out

    def load_state_dict(self, state: dict) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise ContractError(f"checkpoint does not match model: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            target = self.params if k in self.params else self.buffers
            if target[k].shape != v.shape:
                raise DimensionError(f"{k}: checkpoint {v.shape} vs model {target[k].shape}")
            target[k] = np.array(v, dtype=np.float64)

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(checkpoint.load(path))

