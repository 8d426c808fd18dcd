"""Synthetic splice / copy-move / removal samples with exact binary masks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff.init import splitmix64
from .autodiff.tensor import ContractError
from .imgproc import Image, quantize, read_image, write_image

FORGERY_TYPES = ("splice", "copy-move", "removal", "authentic")
SHAPES = ("rectangle", "ellipse")
BACKGROUND_NOISE = 2.0 / 255.0
DEFAULT_FRACTION = (0.02, 0.15)
INPAINT_ITERS = 50

# independent sub-streams of one sample seed
_BG, _DONOR, _REGION, _OFFSET = 0, 1, 2, 3


@dataclass(frozen=True)
class SampleSpec:
    seed: int
    size: int = 64
    forgery: str = "splice"
    fraction: float = 0.05
    shape: str = "ellipse"
    max_area: Optional[int] = None  # strict upper bound on the mask pixel count

    def __post_init__(self):
        if self.forgery not in FORGERY_TYPES:
            raise ContractError(f"unknown forgery type {self.forgery!r}")
        if self.shape not in SHAPES:
            raise ContractError(f"unknown region shape {self.shape!r}")
        if self.size < 8:
            raise ContractError(f"image size {self.size} too small")
        if self.forgery != "authentic" and not 0.0 < self.fraction < 0.5:
            raise ContractError(f"region fraction {self.fraction} does not fit inside the image")

    @property
    def area(self) -> int:
        """Target forged-pixel count."""
        if self.forgery == "authentic":
            return 0
        a = max(1, int(round(self.fraction * self.size ** 2)))
        if self.max_area is not None:
            a = min(a, self.max_area - 1)
        return a


@dataclass(eq=False)
class Sample:
    image: Image
    mask: np.ndarray                 # H×W, 1.0 = forged
    spec: SampleSpec
    original: Image                  # pre-forgery image
    offset: Optional[tuple] = None   # copy-move (dy, dx): dest = source + offset

    @property
    def area_fraction(self) -> float:
        return float(self.mask.mean())


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, stream])


# --------------------------------------------------------------------------
# backgrounds
# --------------------------------------------------------------------------

def smooth_background(seed: int, size: int, stream: int = _BG) -> np.ndarray:
    """Noise-free low-frequency cosine mixture, H×W×3 in roughly [0.1, 0.9]."""
    rng = _rng(seed, stream)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((size, size, 3))
    base = rng.uniform(0.3, 0.7, 3)
    for c in range(3):
        acc = np.full((size, size), base[c])
        for _ in range(4):
            fy, fx = rng.uniform(0.3, 2.5, 2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.02, 0.08)
            acc += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        out[:, :, c] = acc
    return np.clip(out, 0.05, 0.95)


def gen_background(seed: int, size: int) -> Image:
    """Smooth background plus per-pixel Gaussian noise (std 2/255), 8-bit quantized."""
    smooth = smooth_background(seed, size)
    noise = _rng(seed, _BG + 100).normal(0.0, BACKGROUND_NOISE, smooth.shape)
    return quantize(Image(smooth + noise))


# --------------------------------------------------------------------------
# regions
# --------------------------------------------------------------------------

def region_mask(size: int, area: int, shape: str, rng: np.random.Generator,
                margin: int = 0) -> np.ndarray:
    """Boolean mask with exactly ``area`` pixels: the ``area`` pixels nearest a
    seeded centre under an elliptical or box (Chebyshev) distance."""
    if not 1 <= area <= size * size:
        raise ContractError(f"region of {area} pixels does not fit a {size}×{size} image")
    aspect = rng.uniform(0.6, 1.6)
    ry = np.sqrt(area / (np.pi if shape == "ellipse" else 4.0) * aspect)
    rx = area / ((np.pi if shape == "ellipse" else 4.0) * ry)
    lo_y, lo_x = min(ry + margin, size / 2), min(rx + margin, size / 2)
    cy = rng.uniform(lo_y, size - lo_y)
    cx = rng.uniform(lo_x, size - lo_x)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = (yy - cy) / ry, (xx - cx) / rx
    dist = dy * dy + dx * dx if shape == "ellipse" else np.maximum(np.abs(dy), np.abs(dx))
    order = np.argsort(dist, axis=None, kind="stable")
    mask = np.zeros(size * size, dtype=bool)
    mask[order[:area]] = True
    return mask.reshape(size, size)


def _bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return ys.min(), ys.max(), xs.min(), xs.max()


def choose_offset(mask: np.ndarray, rng: np.random.Generator) -> tuple:
    """Seeded translation keeping the source inside the image, disjoint if possible."""
    size = mask.shape[0]
    y0, y1, x0, x1 = _bbox(mask)
    # source = dest - offset must stay in bounds
    dys = np.arange(y1 - size + 1, y0 + 1)
    dxs = np.arange(x1 - size + 1, x0 + 1)
    cand = [(dy, dx) for dy in dys for dx in dxs if (dy, dx) != (0, 0)]
    disjoint = [(dy, dx) for dy, dx in cand if abs(dy) > y1 - y0 or abs(dx) > x1 - x0]
    pool = disjoint or cand
    if not pool:
        raise ContractError("no valid copy-move offset for this region")
    dy, dx = pool[int(rng.integers(len(pool)))]
    return int(dy), int(dx)


def inpaint(data: np.ndarray, mask: np.ndarray, iters: int = INPAINT_ITERS) -> np.ndarray:
    """Fill ``mask`` by Jacobi iterations of the 8-neighbour mean, starting from
    the mean of the pixels bordering the region."""
    out = data.copy()
    ring = np.zeros_like(mask)
    padded = np.pad(mask, 1)
    for oy in (-1, 0, 1):
        for ox in (-1, 0, 1):
            ring |= padded[1 + oy:1 + oy + mask.shape[0], 1 + ox:1 + ox + mask.shape[1]]
    ring &= ~mask
    out[mask] = data[ring].mean(axis=0) if ring.any() else data.mean(axis=(0, 1))
    for _ in range(iters):
        p = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode="edge")
        h, w = mask.shape
        acc = sum(p[1 + oy:1 + oy + h, 1 + ox:1 + ox + w]
                  for oy in (-1, 0, 1) for ox in (-1, 0, 1) if (oy, ox) != (0, 0))
        out[mask] = (acc / 8.0)[mask]
    return out


# --------------------------------------------------------------------------
# forging
# --------------------------------------------------------------------------

def forge(background: Image, spec: SampleSpec) -> Sample:
    size = spec.size
    if (background.height, background.width) != (size, size):
        raise ContractError(f"background {background.height}×{background.width} "
                            f"does not match spec size {size}")
    src = background.data
    if spec.forgery == "authentic":
        return Sample(background, np.zeros((size, size)), spec, background)
    mask = region_mask(size, spec.area, spec.shape, _rng(spec.seed, _REGION), margin=1)
    out = src.copy()
    offset = None
    if spec.forgery == "splice":
        drng = _rng(spec.seed, _DONOR)
        sigma = 0.0 if drng.random() < 0.3 else drng.uniform(6.0, 10.0) / 255.0
        donor = smooth_background(spec.seed, size, stream=_DONOR + 200)
        donor = donor + drng.normal(0.0, sigma, donor.shape) if sigma else donor
        out[mask] = np.clip(np.round(donor[mask] * 255.0) / 255.0, 0.0, 1.0)
    elif spec.forgery == "copy-move":
        offset = choose_offset(mask, _rng(spec.seed, _OFFSET))
        ys, xs = np.nonzero(mask)
        out[ys, xs] = src[ys - offset[0], xs - offset[1]]
    else:
        out = inpaint(src, mask)
        out[mask] = np.round(out[mask] * 255.0) / 255.0
    return Sample(Image(out), mask.astype(np.float64), spec, background, offset)


def generate(spec: SampleSpec) -> Sample:
    """Background plus forgery, fully determined by ``spec``."""
    return forge(gen_background(spec.seed, spec.size), spec)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def type_counts(n: int, mix) -> list:
    """Largest-remainder apportionment of ``n`` samples over the four types."""
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (len(FORGERY_TYPES),) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ContractError(f"mix must be {len(FORGERY_TYPES)} nonnegative fractions summing to 1")
    raw = mix * n
    counts = np.floor(raw).astype(int)
    rem = raw - counts
    for i in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def bucket_limit(cap: float, size: int) -> int:
    """Strict pixel-count bound for a ``< cap`` area bucket."""
    limit = cap * size * size
    if limit <= 1.0:
        raise ContractError(f"bucket <{cap:g} is below the one-pixel floor on {size}×{size}")
    return int(np.ceil(limit))


@dataclass
class Dataset:
    samples: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def manifest(self) -> list:
        return [(i, s.spec.forgery, s.spec.seed, s.area_fraction) for i, s in enumerate(self.samples)]


def make_specs(n: int, seed: int, mix=(0.25, 0.25, 0.25, 0.25), bucket: Optional[float] = None,
               size: int = 64) -> list:
    counts = type_counts(n, mix)
    limit = bucket_limit(bucket, size) if bucket is not None else None
    types = [t for t, k in zip(FORGERY_TYPES, counts) for _ in range(k)]
    order = _rng(seed, 7).permutation(n)
    seeds = splitmix64(seed, n)
    specs = []
    for i in range(n):
        s = int(seeds[i])
        rng = _rng(s, 99)
        lo, hi = DEFAULT_FRACTION if bucket is None else (bucket / 5.0, bucket)
        specs.append(SampleSpec(seed=s, size=size, forgery=types[order[i]],
                                fraction=float(rng.uniform(lo, hi)),
                                shape=SHAPES[int(rng.integers(2))], max_area=limit))
    return specs


def make_dataset(n: int, seed: int, mix=(0.25, 0.25, 0.25, 0.25), bucket: Optional[float] = None,
                 size: int = 64) -> Dataset:
    """``n`` samples whose types follow ``mix`` (splice, copy-move, removal,
    authentic); ``bucket`` caps each forged area strictly below that fraction."""
    return Dataset([generate(sp) for sp in make_specs(n, seed, mix, bucket, size)])


MANIFEST_HEADER = ("idx", "type", "seed", "area_fraction")


def save_dataset(ds: Dataset, root, split: str = "train") -> Path:
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(ds):
        write_image(s.image, out / f"{i}_img.ppm")
        write_image(Image(s.mask), out / f"{i}_mask.pgm")
        rows.append((i, s.spec.forgery, s.spec.seed, repr(s.area_fraction)))
    with open(out / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return out


@dataclass(eq=False)
class LoadedSample:
    idx: int
    image: Image
    mask: np.ndarray
    forgery: str
    seed: int

    @property
    def area_fraction(self) -> float:
        return float(self.mask.mean())


def load_dataset(path) -> list:
    """Read a split directory written by :func:`save_dataset`."""
    path = Path(path)
    out = []
    with open(path / "manifest.tsv", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            i = int(row["idx"])
            mask = (read_image(path / f"{i}_mask.pgm").data[:, :, 0] > 0.5).astype(np.float64)
            out.append(LoadedSample(i, read_image(path / f"{i}_img.ppm"), mask,
                                    row["type"], int(row["seed"])))
    return out
