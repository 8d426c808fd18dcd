"""Pixel-level AUC / F1 / IoU, per-image reports, area buckets and the
distortion sweep."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff.init import stream_seed
from .autodiff.ops import interp_matrix
from .autodiff.tensor import DimensionError
from .imgproc import Distortion, distort

BUCKETS = (0.01, 0.05, 0.10)
THRESHOLD = 0.5


class SingleClassError(ValueError):
    """AUC is undefined when the ground truth has only one class."""


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred.ravel(), gt.ravel() > 0.5


def pixel_auc(pred, gt) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    p, g = _check(pred, gt)
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ground truth has a single class")
    ranks = rankdata(p)
    return float((ranks[g].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion(pred, gt, threshold: float = THRESHOLD) -> tuple:
    """``(tp, fp, fn)`` after binarizing ``pred >= threshold``."""
    p, g = _check(pred, gt)
    b = p >= threshold
    return int(np.sum(b & g)), int(np.sum(b & ~g)), int(np.sum(~b & g))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2.0 * tp / den


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def f1_score(pred, gt, threshold: float = THRESHOLD) -> float:
    return f1_from_counts(*confusion(pred, gt, threshold))


def iou(pred, gt, threshold: float = THRESHOLD) -> float:
    return iou_from_counts(*confusion(pred, gt, threshold))


def resize_mask(m: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a 2-D probability map."""
    if m.shape == (h, w):
        return m
    return interp_matrix(m.shape[0], h, "bilinear") @ m @ interp_matrix(m.shape[1], w, "bilinear").T


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class ImageRecord:
    idx: int
    distortion: str
    forgery: str
    area_fraction: float
    auc: float          # nan when the ground truth is single-class
    f1: float
    iou: float
    counts: tuple = (0, 0, 0)

    @property
    def two_class(self) -> bool:
        return not math.isnan(self.auc)


@dataclass
class Summary:
    distortion: str
    scope: str
    n: int
    auc: float
    f1: float
    iou: float
    excluded: int


@dataclass
class MetricsReport:
    """Per-image records plus aggregates.

    Aggregates average over images whose ground truth has both classes;
    single-class images stay in the per-image table and are counted as
    excluded. ``pooled=True`` instead scores all pixels of the included
    images jointly.
    """

    records: list = field(default_factory=list)
    pooled: bool = False
    _pixels: dict = field(default_factory=dict, repr=False)

    def distortions(self) -> list:
        seen = []
        for r in self.records:
            if r.distortion not in seen:
                seen.append(r.distortion)
        return seen

    def _select(self, distortion: str, cap: Optional[float]):
        rows = [r for r in self.records if r.distortion == distortion]
        if cap is not None:
            rows = [r for r in rows if 0.0 < r.area_fraction < cap]
        return rows

    def summarize(self, distortion: str, cap: Optional[float] = None) -> Summary:
        rows = self._select(distortion, cap)
        used = [r for r in rows if r.two_class]
        scope = "all" if cap is None else f"<{cap:g}"
        if not used:
            return Summary(distortion, scope, 0, math.nan, math.nan, math.nan, len(rows))
        if self.pooled:
            preds = np.concatenate([self._pixels[(r.distortion, r.idx)][0] for r in used])
            gts = np.concatenate([self._pixels[(r.distortion, r.idx)][1] for r in used])
            counts = np.sum([r.counts for r in used], axis=0)
            return Summary(distortion, scope, len(used), pixel_auc(preds, gts),
                           f1_from_counts(*counts), iou_from_counts(*counts), len(rows) - len(used))
        return Summary(distortion, scope, len(used),
                       float(np.mean([r.auc for r in used])),
                       float(np.mean([r.f1 for r in used])),
                       float(np.mean([r.iou for r in used])),
                       len(rows) - len(used))

    def summaries(self) -> list:
        out = []
        for d in self.distortions():
            out.append(self.summarize(d))
            out.extend(self.summarize(d, cap) for cap in BUCKETS)
        return out

    def aggregate(self, distortion: str = "none") -> Summary:
        return self.summarize(distortion)


REPORT_HEADER = ("idx", "distortion", "type", "area_fraction", "auc", "f1", "iou")
SUMMARY_HEADER = ("distortion", "scope", "n", "auc", "f1", "iou", "excluded")


def write_report(report: MetricsReport, out_dir) -> tuple:
    """Write ``report.tsv`` and ``summary.tsv``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rp, sp = out / "report.tsv", out / "summary.tsv"
    with open(rp, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.records:
            w.writerow((r.idx, r.distortion, r.forgery, repr(r.area_fraction),
                        repr(r.auc), repr(r.f1), repr(r.iou)))
    with open(sp, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in report.summaries():
            w.writerow((s.distortion, s.scope, s.n, repr(s.auc), repr(s.f1), repr(s.iou), s.excluded))
    return rp, sp


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def score_image(pred: np.ndarray, gt: np.ndarray, idx: int = 0, distortion: str = "none",
                forgery: str = "") -> ImageRecord:
    h, w = gt.shape
    full = resize_mask(np.asarray(pred, dtype=np.float64), h, w)
    if full.shape != gt.shape:
        raise AssertionError(f"upsampled mask {full.shape} does not match ground truth {gt.shape}")
    try:
        auc = pixel_auc(full, gt)
    except SingleClassError:
        auc = math.nan
    counts = confusion(full, gt)
    return ImageRecord(idx, distortion, forgery, float(np.mean(gt > 0.5)), auc,
                       f1_from_counts(*counts), iou_from_counts(*counts), counts)


def distortion_seed(sample_seed: int, tag: str) -> int:
    return stream_seed(sample_seed, tag) & 0xFFFFFFFF


def evaluate(model, dataset: Sequence, distortions: Optional[Sequence[Distortion]] = None,
             include_clean: bool = True, pooled: bool = False, threads: int = 1) -> MetricsReport:
    """Score ``model.predict(image)`` on every sample, optionally also under
    each distortion. Samples need ``image``, ``mask``, a seed and a type
    (either ``spec`` or ``seed``/``forgery`` attributes)."""
    rows = [None] if include_clean else []
    rows += list(distortions or [])
    jobs = []
    for d in rows:
        for i, s in enumerate(dataset):
            jobs.append((d, i, s))

    def run(job):
        d, i, s = job
        seed, forgery = _identity(s)
        idx = getattr(s, "idx", i)
        image = s.image if d is None else distort(s.image, d, seed=distortion_seed(seed, d.tag))
        pred = model.predict(image)
        tag = "none" if d is None else d.tag
        rec = score_image(pred, s.mask, idx, tag, forgery)
        pixels = None
        if pooled:
            pixels = (resize_mask(pred, *s.mask.shape).ravel(), s.mask.ravel())
        return rec, pixels

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    report = MetricsReport(pooled=pooled)
    for rec, pixels in results:
        report.records.append(rec)
        if pixels is not None:
            report._pixels[(rec.distortion, rec.idx)] = pixels
    return report


def _identity(sample) -> tuple:
    spec = getattr(sample, "spec", None)
    if spec is not None:
        return spec.seed, spec.forgery
    return sample.seed, sample.forgery
