"""Run configuration: line-oriented ``key=value`` text with typed fields."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

from .model import ModelConfig


class ConfigError(ValueError):
    """Unknown key or malformed value."""


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_str(text: str) -> Optional[str]:
    return None if text.strip().lower() in ("", "none") else text.strip()


@dataclass
class RunConfig:
    seed: Optional[int] = None
    input_size: int = 64
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    batch_size: int = 4
    lr: float = 2e-4
    epochs: int = 25
    lr_halving_period: int = 5
    max_steps: int = 0
    augment: str = "none"       # "none" | "dihedral"
    train_data: Optional[str] = None
    val_data: Optional[str] = None
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
    n_samples: int = 256
    mix: tuple = (0.25, 0.25, 0.25, 0.25)
    bucket: Optional[float] = None
    threads: int = 1

    _PARSERS = {
        "stage_channels": _ints, "sccm_ratios": _ints, "mix": _floats,
        "bucket": _opt_float, "train_data": _opt_str, "val_data": _opt_str,
        "seed": lambda t: int(t),
    }

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    def set(self, key: str, text: str) -> None:
        """Assign one field from its textual form."""
        key = key.strip().replace("-", "_")
        if key not in self.keys():
            raise ConfigError(f"unknown config key {key!r}")
        parser = self._PARSERS.get(key)
        if parser is None:
            kind = type(getattr(RunConfig(), key))
            parser = kind if kind in (int, float, str) else str
        try:
            setattr(self, key, parser(text.strip()))
        except ValueError as exc:
            raise ConfigError(f"bad value {text!r} for {key}: {exc}") from None

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            cfg.set(key, value)
        return cfg

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            v = getattr(self, key)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.keys()}

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                input_size=self.input_size, stage_channels=self.stage_channels,
                blocks_per_stage=self.blocks_per_stage, gf_r=self.gf_r, gf_eps=self.gf_eps,
                dc_kernels=self.dc_kernels, dc_temperature=self.dc_temperature,
                reduction=self.reduction, arpm_ratio=self.arpm_ratio,
                sccm_ratios=self.sccm_ratios, noise_branch=self.noise_branch,
                fam=self.fam, arpm=self.arpm)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
