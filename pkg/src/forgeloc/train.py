"""Mini-batch Adam training with the step-halving learning-rate schedule."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff.adam import AdamState, adam_step
from .autodiff.tensor import NonFiniteError
from .config import RunConfig
from .model import Batch, ForgeryNet

LOG_HEADER = ("epoch", "step", "lr", "loss")


class TrainingError(RuntimeError):
    pass


def learning_rate(base: float, epoch: int, period: int) -> float:
    """``base`` halved every ``period`` epochs (``period <= 0`` keeps it fixed)."""
    return base if period <= 0 else base * 0.5 ** (epoch // period)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 1_000_003, epoch]).permutation(n)


AUGMENTATIONS = ("none", "dihedral")


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """One of the eight flips/quarter turns of the last two axes (``k`` in 0..7)."""
    if k & 4:
        a = a[..., ::-1]
    return np.rot90(a, k & 3, axes=(-2, -1))


def augment_batch(batch: Batch, ks) -> Batch:
    """Apply per-sample dihedral transforms to inputs and masks alike.

    The noise input is transformed too rather than recomputed: the box filters
    behind it use edge replication, so it commutes with flips and rotations.
    """
    def each(a):
        if a is None:
            return None
        return np.ascontiguousarray(np.stack([dihedral(x, int(k)) for x, k in zip(a, ks)]))
    return Batch(each(batch.rgb), each(batch.noise), each(batch.masks))


def epoch_transforms(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 2_000_003, epoch]).integers(0, 8, n)


@dataclass
class TrainResult:
    model: ForgeryNet
    log: list = field(default_factory=list)   # (epoch, step, lr, loss)

    @property
    def final_loss(self) -> float:
        return self.log[-1][3]


def diagnose(model: ForgeryNet, batch: Batch) -> str:
    """Replay a step with finite checking to name the first non-finite op."""
    try:
        model.loss_and_grads(batch, check_finite=True)
    except NonFiniteError as exc:
        return str(exc)
    return "loss became non-finite"


def _write_log(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(LOG_HEADER)
        for epoch, step, lr, loss in rows:
            w.writerow((epoch, step, repr(lr), repr(loss)))


def train(cfg: RunConfig, samples: Sequence, out_dir=None, model: Optional[ForgeryNet] = None,
          verbose: bool = False) -> TrainResult:
    """Train on ``samples`` (objects with ``image`` and ``mask``).

    When ``out_dir`` is given, ``train.tsv`` is rewritten and ``model.ckpt``
    saved at the end of every epoch. ``cfg.max_steps > 0`` stops early.
    """
    if cfg.seed is None:
        raise TrainingError("training needs an explicit seed")
    if cfg.augment not in AUGMENTATIONS:
        raise TrainingError(f"unknown augmentation {cfg.augment!r}")
    model = model or ForgeryNet(cfg.model_config(), seed=cfg.seed)
    data = model.prepare([s.image for s in samples], [s.mask for s in samples])
    n = len(samples)
    state = AdamState(lr=cfg.lr)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step = 0
    for epoch in range(cfg.epochs):
        state.lr = learning_rate(cfg.lr, epoch, cfg.lr_halving_period)
        order = epoch_order(cfg.seed, epoch, n)
        turns = epoch_transforms(cfg.seed, epoch, n) if cfg.augment == "dihedral" else None
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = data.take(idx)
            if turns is not None:
                batch = augment_batch(batch, turns[idx])
            loss, grads = model.loss_and_grads(batch)
            if not math.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite training step {step}: {diagnose(model, batch)}")
            adam_step(model.params, grads, state)
            result.log.append((epoch, step, state.lr, loss))
            if verbose:
                print(f"epoch {epoch} step {step} lr {state.lr:g} loss {loss:.5f}", flush=True)
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        if out is not None:
            _write_log(result.log, out / "train.tsv")
            model.save(out / "model.ckpt")
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return result
