"""Four-stage conv-BN-ReLU feature extractor producing strides 2, 4, 8, 16."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .autodiff.tensor import ContractError, DimensionError, Tensor
from .nn import ParamSet, conv_bn_relu


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    stem_channels: Optional[int] = None
    blocks_per_stage: int = 1
    input_size: int = 64

    def __post_init__(self):
        sc = tuple(int(c) for c in self.stage_channels)
        object.__setattr__(self, "stage_channels", sc)
        if len(sc) != 4:
            raise ContractError(f"need exactly 4 stage widths, got {sc}")
        if any(c < 1 for c in sc) or any(b <= a for a, b in zip(sc, sc[1:])):
            raise ContractError(f"stage_channels must be positive and strictly increasing, got {sc}")
        if self.blocks_per_stage < 1:
            raise ContractError("blocks_per_stage must be >= 1")
        if self.input_size < 16 or self.input_size % 16:
            raise ContractError(f"input_size must be a positive multiple of 16, got {self.input_size}")

    @property
    def stem(self) -> int:
        return self.stem_channels or self.stage_channels[0]


def build_backbone(cfg: BackboneConfig, ps: ParamSet, prefix: str) -> None:
    """Add one branch's parameters to ``ps`` under ``prefix`` (e.g. ``rgb.``)."""
    ps.conv(prefix + "stem.conv", 3, cfg.stem, 3)
    ps.bn(prefix + "stem.bn", cfg.stem)
    cin = cfg.stem
    for s, cout in enumerate(cfg.stage_channels, start=1):
        for blk in range(cfg.blocks_per_stage):
            name = f"{prefix}stage{s}.block{blk}"
            ps.conv(name + ".conv", cin, cout, 3)
            ps.bn(name + ".bn", cout)
            cin = cout


def backbone_param_count(cfg: BackboneConfig) -> int:
    def block(cin, cout):
        return cin * cout * 9 + cout + 2 * cout

    total = block(3, cfg.stem)
    cin = cfg.stem
    for cout in cfg.stage_channels:
        total += block(cin, cout) + (cfg.blocks_per_stage - 1) * block(cout, cout)
        cin = cout
    return total


def extract_features(p, buffers, x: Tensor, cfg: BackboneConfig, prefix: str,
                     training: bool) -> list:
    """Return ``[f1, f2, f3, f4]`` at strides 2, 4, 8, 16."""
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise DimensionError(f"backbone expects N×3×{cfg.input_size}×{cfg.input_size}, got {x.shape}")
    h = conv_bn_relu(p, buffers, prefix + "stem", x, training, stride=2)
    feats = []
    for s in range(1, 5):
        for blk in range(cfg.blocks_per_stage):
            stride = 2 if (s > 1 and blk == 0) else 1
            h = conv_bn_relu(p, buffers, f"{prefix}stage{s}.block{blk}", h, training, stride=stride)
        feats.append(h)
    return feats
