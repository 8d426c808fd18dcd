"""Image container, PGM/PPM I/O, guided-noise extraction and distortions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.ops import interp_matrix
from .autodiff.tensor import ContractError, DimensionError, Tensor

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_NORM = 8.0 * np.sqrt(2.0)

# ITU T.81 Annex K luminance quantization table
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class ParseError(ValueError):
    pass


@dataclass(eq=False)
class Image:
    """H×W×C float image with values clamped to [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise DimensionError(f"image data must be H×W×{{1,3}}, got {arr.shape}")
        self.data = np.clip(arr, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.data, other.data)


@dataclass(eq=False)
class GuidedNoiseResult:
    content: Image
    residual: Image
    edges: Image
    guided_noise: Image


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

def _header_tokens(blob: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, payload offset)."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"malformed header: unexpected end of data at byte {pos}")
        tokens.append((blob[start:pos], start))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ParseError(f"malformed header: missing whitespace after maxval at byte {pos}")
    return tokens, pos + 1


def decode_pnm(blob: bytes) -> Image:
    tokens, payload = _header_tokens(blob, 4)
    magic = tokens[0][0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r} at byte 0")
    values = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise ParseError(f"malformed header field {tok!r} at byte {at}")
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise ParseError(f"maxval {maxval} not supported (need 255) at byte {tokens[3][1]}")
    if width < 1 or height < 1:
        raise ParseError(f"bad dimensions {width}x{height} at byte {tokens[1][1]}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    if len(blob) - payload < need:
        raise ParseError(f"truncated payload: expected {need} bytes from byte {payload}, "
                         f"file ends at byte {len(blob)}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=payload)
    return Image(raw.reshape(height, width, channels).astype(np.float64) / 255.0)


def encode_pnm(image: Image) -> bytes:
    magic = b"P5" if image.channels == 1 else b"P6"
    raw = np.clip(np.round(image.data * 255.0), 0, 255).astype(np.uint8)
    return magic + f"\n{image.width} {image.height}\n255\n".encode() + raw.tobytes()


def read_image(path) -> Image:
    return decode_pnm(Path(path).read_bytes())


def write_image(image: Image, path) -> None:
    Path(path).write_bytes(encode_pnm(image))


def quantize(image: Image) -> Image:
    """Snap values to the 8-bit grid used on disk."""
    return Image(np.round(image.data * 255.0) / 255.0)


# --------------------------------------------------------------------------
# filters
# --------------------------------------------------------------------------

def _window_sum(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    c = np.cumsum(a, axis=axis)
    zero = np.zeros_like(np.take(c, [0], axis=axis))
    c = np.concatenate([zero, c], axis=axis)
    n = a.shape[axis] - 2 * r
    hi = np.take(c, np.arange(2 * r + 1, 2 * r + 1 + n), axis=axis)
    lo = np.take(c, np.arange(0, n), axis=axis)
    return hi - lo


def box_mean(a: np.ndarray, r: int) -> np.ndarray:
    """(2r+1)² window mean of an H×W×C array with edge-replicated borders."""
    if r < 1:
        raise ContractError(f"box filter radius must be >= 1, got {r}")
    # running sums are taken relative to a per-channel anchor so constant
    # regions come back exactly
    anchor = a[:1, :1, :]
    p = np.pad(a - anchor, ((r, r), (r, r), (0, 0)), mode="edge")
    s = _window_sum(_window_sum(p, r, 0), r, 1)
    return anchor + s / float((2 * r + 1) ** 2)


def box_filter(image: Image, r: int) -> Image:
    return Image(box_mean(image.data, r))


def guided_filter_array(p: np.ndarray, guide: np.ndarray, r: int, eps: float) -> np.ndarray:
    if p.shape != guide.shape:
        raise DimensionError(f"guided filter: input {p.shape} vs guide {guide.shape}")
    if eps <= 0:
        raise ContractError(f"guided filter eps must be > 0, got {eps}")
    mean_i = box_mean(guide, r)
    mean_p = box_mean(p, r)
    var_i = box_mean(guide * guide, r) - mean_i * mean_i
    cov = box_mean(guide * p, r) - mean_i * mean_p
    a = cov / (var_i + eps)
    b = mean_p - a * mean_i
    return box_mean(a, r) * guide + box_mean(b, r)


def guided_filter(image: Image, guide: Image, r: int = 2, eps: float = 1e-4) -> Image:
    """Per-channel guided filter of ``image`` steered by ``guide``."""
    return Image(guided_filter_array(image.data, guide.data, r, eps))


def luminance(image: Image) -> np.ndarray:
    if image.channels == 1:
        return image.data[:, :, 0]
    return image.data @ LUMA


def sobel_array(gray: np.ndarray) -> np.ndarray:
    p = np.pad(gray, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    dy = p[2:, :] - p[:-2, :]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return np.sqrt(gx * gx + gy * gy) / SOBEL_NORM


def sobel(image: Image) -> Image:
    """Normalized Sobel gradient magnitude (single channel)."""
    return Image(sobel_array(luminance(image)))


def guided_noise(image: Image, r: int = 2, eps: float = 1e-4) -> GuidedNoiseResult:
    """Guided-filter residual plus Sobel edges, clamped to [0, 1]."""
    if image.channels != 3:
        raise ContractError(f"guided noise needs a 3-channel image, got {image.channels}")
    content = guided_filter(image, image, r, eps)
    residual = np.abs(image.data - content.data)
    edges = sobel(image)
    combined = residual + np.repeat(edges.data, 3, axis=2)
    return GuidedNoiseResult(
        content=content,
        residual=Image(residual),
        edges=Image(np.repeat(edges.data, 3, axis=2)),
        guided_noise=Image(combined),
    )


# --------------------------------------------------------------------------
# distortions
# --------------------------------------------------------------------------

DISTORTION_KINDS = ("resize", "blur", "noise", "jpeg")


@dataclass(frozen=True)
class Distortion:
    kind: str
    param: float

    def __post_init__(self):
        k, v = self.kind, self.param
        if k not in DISTORTION_KINDS:
            raise ContractError(f"unknown distortion {k!r}")
        if k == "resize" and not 0.0 < v <= 1.0:
            raise ContractError(f"resize factor must be in (0, 1], got {v}")
        if k == "blur" and (v != int(v) or v < 1 or int(v) % 2 == 0):
            raise ContractError(f"blur kernel size must be odd and >= 1, got {v}")
        if k == "noise" and v < 0:
            raise ContractError(f"noise sigma must be >= 0, got {v}")
        if k == "jpeg" and (v != int(v) or not 1 <= v <= 100):
            raise ContractError(f"jpeg quality must be an integer in [1, 100], got {v}")

    @property
    def tag(self) -> str:
        v = self.param
        return f"{self.kind}:{int(v) if float(v).is_integer() and self.kind != 'resize' else v}"

    @classmethod
    def parse(cls, text: str) -> "Distortion":
        """Parse ``kind:value`` such as ``resize:0.78`` or ``jpeg:50``."""
        kind, sep, value = text.strip().partition(":")
        if not sep:
            raise ContractError(f"distortion spec {text!r} must look like kind:value")
        try:
            return cls(kind, float(value))
        except ValueError as exc:
            raise ContractError(f"bad distortion spec {text!r}: {exc}") from exc


# the eight post-processing rows of the robustness protocol
ROBUSTNESS_SUITE = tuple(Distortion(k, v) for k, v in (
    ("resize", 0.78), ("resize", 0.25), ("blur", 3), ("blur", 15),
    ("noise", 3), ("noise", 15), ("jpeg", 100), ("jpeg", 50)))


def _resample(data: np.ndarray, h: int, w: int) -> np.ndarray:
    ah = interp_matrix(data.shape[0], h, "bilinear")
    aw = interp_matrix(data.shape[1], w, "bilinear")
    return np.einsum("ah,hwc,bw->abc", ah, data, aw, optimize=True)


def gaussian_kernel(k: int) -> np.ndarray:
    if k == 1:
        return np.ones(1)
    sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8
    x = np.arange(k) - (k - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _separable(data: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    p = np.pad(data, ((r, r), (r, r), (0, 0)), mode="edge")
    h, w = data.shape[:2]
    tmp = sum(kernel[i] * p[i:i + h] for i in range(len(kernel)))
    return sum(kernel[i] * tmp[:, i:i + w] for i in range(len(kernel)))


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


def jpeg_table(quality: int) -> np.ndarray:
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.maximum(np.floor((JPEG_LUMA_TABLE * scale + 50) / 100), 1.0)


def _jpeg_plane(plane: np.ndarray, table: np.ndarray, d: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    p = np.pad(plane * 255.0 - 128.0, ((0, ph), (0, pw)), mode="edge")
    bh, bw = p.shape[0] // 8, p.shape[1] // 8
    blocks = p.reshape(bh, 8, bw, 8).transpose(0, 2, 1, 3)
    coef = d @ blocks @ d.T
    q = coef / table
    q = np.sign(q) * np.floor(np.abs(q) + 0.5)
    rec = d.T @ (q * table) @ d
    rec = rec.transpose(0, 2, 1, 3).reshape(p.shape)[:h, :w]
    return np.clip(np.round(rec + 128.0), 0, 255) / 255.0


def distort(image: Image, d: Distortion, seed: int = 0) -> Image:
    """Apply one post-processing distortion; output keeps the input size."""
    data = image.data
    h, w = image.height, image.width
    if d.kind == "resize":
        sh = max(1, int(round(d.param * h)))
        sw = max(1, int(round(d.param * w)))
        out = _resample(_resample(data, sh, sw), h, w)
    elif d.kind == "blur":
        out = _separable(data, gaussian_kernel(int(d.param)))
    elif d.kind == "noise":
        rng = np.random.default_rng(seed)
        out = data + rng.normal(0.0, d.param / 255.0, size=data.shape)
    else:
        table = jpeg_table(int(d.param))
        dm = dct_matrix()
        out = np.stack([_jpeg_plane(data[:, :, c], table, dm) for c in range(image.channels)], axis=2)
    return Image(out)


# --------------------------------------------------------------------------
# tensor bridge
# --------------------------------------------------------------------------

def to_tensor(image: Image) -> Tensor:
    return Tensor(np.ascontiguousarray(image.data.transpose(2, 0, 1))[None])


def from_tensor(t) -> Image:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise DimensionError(f"from_tensor expects 1×C×H×W, got {arr.shape}")
    return Image(arr[0].transpose(1, 2, 0))
