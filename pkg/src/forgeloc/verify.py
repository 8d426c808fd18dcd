"""End-to-end finite-difference check of the miniature network.

Every scalar parameter is perturbed by ``±h``. Perturbed copies are
evaluated many at a time through the grouped (graph-free) forward, and each
parameter's stage is started from cached upstream activations, since those do
not depend on it. The analytic side is a single ordinary reverse-mode sweep of
the full model.
"""

from __future__ import annotations

import copy
import re
from typing import Optional

import numpy as np

from .autodiff.gradcheck import GradCheckReport, ParamCheck, relative_error
from .autodiff.tensor import ContractError, Graph, Tensor
from .config import RunConfig
from .datagen import make_dataset
from .localizer import MaskSet, downsample_mask
from .model import Batch, ForgeryNet, ModelConfig
from .nn import GroupedParams

MINI_SIZE = 16
MINI_CHANNELS = (4, 8, 12, 16)


def mini_config(cfg: Optional[RunConfig] = None) -> ModelConfig:
    """The miniature model: 16×16 input, widths 4/8/12/16, other settings from ``cfg``."""
    base = cfg or RunConfig()
    return ModelConfig(input_size=MINI_SIZE, stage_channels=MINI_CHANNELS,
                       gf_r=base.gf_r, gf_eps=base.gf_eps, dc_kernels=base.dc_kernels,
                       dc_temperature=base.dc_temperature, reduction=base.reduction,
                       arpm_ratio=base.arpm_ratio, noise_branch=base.noise_branch,
                       fam=base.fam, arpm=base.arpm)


def mini_batch(model: ForgeryNet, seed: int, n: int = 2) -> Batch:
    ds = make_dataset(n, seed, mix=(0.5, 0.5, 0.0, 0.0), size=model.cfg.input_size)
    return model.prepare([s.image for s in ds], [s.mask for s in ds])


def grouped_loss(masks: MaskSet, gt: np.ndarray, groups: int, clamp: float = 1e-7) -> np.ndarray:
    """Per-group total loss for a grouped forward pass."""
    total = np.zeros(groups)
    for m in masks.masks:
        g = np.tile(downsample_mask(gt, *m.shape[2:]), (groups, 1, 1, 1))
        p = np.clip(m.data, clamp, 1.0 - clamp)
        bce = -(g * np.log(p) + (1.0 - g) * np.log1p(-p))
        total += bce.reshape(groups, -1).mean(axis=1)
    return total


def _tile(t: Optional[Tensor], groups: int) -> Optional[Tensor]:
    if t is None:
        return None
    return Tensor(np.tile(t.data, (groups,) + (1,) * (t.ndim - 1)))


class StagedEvaluator:
    """Evaluates the training loss for groups of parameter variants.

    Upstream activations that a parameter cannot influence are computed once
    with the unperturbed parameters and replayed for every group.
    """

    def __init__(self, model: ForgeryNet, batch: Batch, training: bool = True):
        self.model = model
        self.batch = batch
        self.training = training
        self.buffers = copy.deepcopy(model.buffers)
        const = model.constants()
        with _frozen_buffers(model, self.buffers):
            self.f_rgb, self.f_n = model.features(const, batch, training)
            self.xs = [model.scale_features(const, i + 1, self.f_rgb[i], self.f_n[i], training)
                       for i in range(4)]

    @staticmethod
    def stage(name: str):
        """``("input",)``, ``("scale", i)`` or ``("head",)`` for a parameter name."""
        if name.startswith(("rgb.", "noise.")):
            return ("input",)
        m = re.match(r"(fam|arpm)\.scale(\d)\.", name)
        if m:
            return ("scale", int(m.group(2)))
        if name.startswith("loc"):
            return ("head",)
        raise ContractError(f"no stage for parameter {name!r}")

    def losses(self, p: GroupedParams, stage) -> np.ndarray:
        model, g = self.model, p.groups
        with _frozen_buffers(model, self.buffers):
            if stage[0] == "input":
                rgb = np.tile(self.batch.rgb, (g, 1, 1, 1))
                noise = None if self.batch.noise is None else np.tile(self.batch.noise, (g, 1, 1, 1))
                masks = model.forward(p, Batch(rgb, noise), self.training)
            else:
                xs = [_tile(x, g) for x in self.xs]
                if stage[0] == "scale":
                    i = stage[1]
                    xs[i - 1] = model.scale_features(p, i, _tile(self.f_rgb[i - 1], g),
                                                     _tile(self.f_n[i - 1], g), self.training)
                masks = model.localize(p, xs)
        return grouped_loss(masks, self.batch.masks, g)


class _frozen_buffers:
    """Temporarily point the model at a private copy of its BatchNorm buffers."""

    def __init__(self, model: ForgeryNet, buffers: dict):
        self.model, self.buffers = model, buffers

    def __enter__(self):
        self.saved = self.model.buffers
        self.model.buffers = copy.deepcopy(self.buffers)

    def __exit__(self, *exc):
        self.model.buffers = self.saved
        return False


def model_gradients(model: ForgeryNet, batch: Batch, training: bool = True) -> tuple:
    """Loss and reverse-mode gradients without disturbing the model's buffers."""
    with _frozen_buffers(model, model.buffers):
        graph = Graph()
        leaves = graph.leaves_from(model.params)
        loss = model.loss(leaves, batch, training=training)
        return loss.item(), graph.backward(loss)


def model_gradcheck(mcfg: Optional[ModelConfig] = None, seed: int = 0, tol: float = 1e-4,
                    h: float = 1e-5, floor: float = 1e-6, chunk: int = 64,
                    names: Optional[list] = None, grads: Optional[dict] = None,
                    model: Optional[ForgeryNet] = None) -> GradCheckReport:
    """Central-difference check of every scalar parameter of the miniature model.

    ``grads`` substitutes the analytic gradients (used to confirm that an
    injected error is caught).
    """
    model = model or ForgeryNet(mcfg or mini_config(), seed=seed)
    batch = mini_batch(model, seed)
    loss, analytic = model_gradients(model, batch)
    if grads is not None:
        analytic = grads
    ev = StagedEvaluator(model, batch)
    base = {k: v[None] for k, v in model.params.items()}
    # the grouped path must reproduce the ordinary loss before it can judge gradients
    check = ev.losses(GroupedParams(base, 1), ("input",))[0]
    if abs(check - loss) > 1e-9 * max(1.0, abs(loss)):
        raise ContractError(f"grouped loss {check!r} differs from graph loss {loss!r}")
    report = GradCheckReport(tol=tol, h=h)
    for name in names or list(model.params):
        value = model.params[name]
        stage = ev.stage(name)
        flat = value.reshape(-1)
        num = np.empty(flat.size)
        for start in range(0, flat.size, chunk):
            idx = np.arange(start, min(start + chunk, flat.size))
            g = 2 * idx.size
            arrays = {k: np.broadcast_to(v, (g,) + v.shape[1:]) for k, v in base.items()}
            pert = np.repeat(value.reshape(1, -1), g, axis=0)
            rows = np.arange(idx.size)
            pert[2 * rows, idx] = flat[idx] + h
            pert[2 * rows + 1, idx] = flat[idx] - h
            arrays[name] = pert.reshape((g,) + value.shape)
            out = ev.losses(GroupedParams(arrays, g), stage)
            num[idx] = (out[0::2] - out[1::2]) / (2.0 * h)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        err = relative_error(ana, num, floor)
        j = int(np.argmax(err))
        report.results.append(ParamCheck(
            name=name, worst_error=float(err[j]),
            worst_index=tuple(int(v) for v in np.unravel_index(j, value.shape)),
            analytic=float(ana[j]), numeric=float(num[j]),
            n_checked=int(flat.size), n_failed=int(np.sum(err > tol))))
    return report
