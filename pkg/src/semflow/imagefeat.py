"""Image loading, the max-dimension resize rule, and dense per-pixel SIFT."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import (
    BadMagic,
    CorruptPayload,
    DecodeFailed,
    ImageTooSmall,
    NotFound,
    UnsupportedFormat,
    VersionMismatch,
)

# ITU-R 601 luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Pillow reports both PGM and PPM as "PPM".
SUPPORTED_FORMATS = {"PNG", "JPEG", "PPM"}

# Descriptors with a smaller pre-normalization norm are treated as empty.
_ZERO_NORM = 1e-10


@dataclass
class ImageGray:
    """Row-major luminance image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"image data must be a non-empty 2-D array, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class FeatureMap:
    """H x W grid of C-channel descriptors, stored as an (H, W, C) array."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"feature data must be (H, W, C), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)) or self.data.min(initial=0.0) < 0.0:
            raise ValueError("feature values must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True)
class SiftParams:
    cell_size: int = 2
    grid: int = 4
    orientation_bins: int = 8
    clamp: float = 0.2
    smoothing_sigma: float = 0.8

    def __post_init__(self):
        if self.grid != 4 or self.orientation_bins != 8:
            raise ValueError("dense SIFT uses a fixed 4x4 grid of 8 orientation bins")
        if self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        if not 0.0 < self.clamp <= 1.0:
            raise ValueError("clamp must lie in (0, 1]")
        if self.smoothing_sigma < 0.0:
            raise ValueError("smoothing_sigma must be >= 0")

    @property
    def channels(self) -> int:
        return self.grid * self.grid * self.orientation_bins

    @property
    def window_radius(self) -> int:
        """Largest pixel offset from the centre that receives non-zero binning weight."""
        return int(math.ceil(((self.grid - 1) / 2 + 1) * self.cell_size)) - 1


def load_image(path) -> ImageGray:
    """Read a PNG, JPEG or PGM/PPM file as a luminance image in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise NotFound(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in SUPPORTED_FORMATS:
                raise UnsupportedFormat(f"{path}: unsupported format {fmt}")
            im.load()
            return ImageGray(_to_luminance(im))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise NotFound(str(exc)) from exc
        raise DecodeFailed(f"{path}: {exc}") from exc


def _to_luminance(im: Image.Image) -> np.ndarray:
    mode = im.mode
    if mode == "1":
        return np.asarray(im, dtype=np.float64)
    if mode == "L":
        return np.asarray(im, dtype=np.float64) / 255.0
    if mode == "LA":
        return np.asarray(im.getchannel("L"), dtype=np.float64) / 255.0
    if mode.startswith("I;16") or mode == "I":
        return np.clip(np.asarray(im, dtype=np.float64) / 65535.0, 0.0, 1.0)
    if mode == "F":
        return np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)
    rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    gray = rgb @ np.asarray(LUMA_WEIGHTS)
    return np.clip(gray, 0.0, 1.0)


def save_image(path, img: ImageGray) -> None:
    """Write an image as 8-bit grayscale (format picked from the suffix)."""
    data = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def _resample_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-normalised triangle-filter weights mapping n_in samples to n_out."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale
    pos = np.arange(n_in) + 0.5
    w = np.maximum(0.0, 1.0 - np.abs(pos[None, :] - centers[:, None]) / support)
    return w / w.sum(axis=1, keepdims=True)


def resize_max_dim(img: ImageGray, max_dim: int) -> ImageGray:
    """Bilinearly shrink ``img`` so that its longer side equals ``max_dim``."""
    if max_dim < 1:
        raise ValueError("max_dim must be >= 1")
    h, w = img.height, img.width
    if max(h, w) <= max_dim:
        return img
    if w >= h:
        new_w = max_dim
        new_h = max(1, int(math.floor(h * max_dim / w + 0.5)))
    else:
        new_h = max_dim
        new_w = max(1, int(math.floor(w * max_dim / h + 0.5)))
    wy = _resample_weights(h, new_h)
    wx = _resample_weights(w, new_w)
    out = wy @ img.data @ wx.T
    return ImageGray(np.clip(out, 0.0, 1.0))


def _gradients(data: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    smooth = gaussian_filter(data, sigma, mode="nearest") if sigma > 0 else data
    padded = np.pad(smooth, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gx, gy


def _cell_kernels(params: SiftParams) -> tuple[np.ndarray, np.ndarray]:
    """Triangle binning kernels, one row per cell, over offsets -R..R."""
    radius = params.window_radius
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    centers = (np.arange(params.grid) - (params.grid - 1) / 2) * params.cell_size
    kernels = np.maximum(0.0, 1.0 - np.abs(offsets[None, :] - centers[:, None]) / params.cell_size)
    return offsets.astype(int), kernels


def _correlate_axis(arr: np.ndarray, offsets: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """out[p] = sum_d kernel[d] * arr[p + d] along ``axis`` with zero padding."""
    radius = int(np.max(np.abs(offsets)))
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad)
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for d, k in zip(offsets, kernel):
        if k == 0.0:
            continue
        out += k * np.take(padded, np.arange(radius + d, radius + d + n), axis=axis)
    return out


def dense_sift(img: ImageGray, params: SiftParams | None = None) -> FeatureMap:
    """One 128-D SIFT descriptor per pixel.

    Each descriptor pools gradient orientations over a 4x4 grid of cells
    centred on the pixel. Orientation and spatial binning are both bilinear.
    Gradients outside the image count as zero. The 4x4x8 histogram is
    L2-normalised, clamped at ``params.clamp`` and renormalised. Channels are
    laid out as ``(cell_row, cell_col, orientation)``.
    """
    params = params or SiftParams()
    min_side = params.grid * params.cell_size
    if img.height < min_side or img.width < min_side:
        raise ImageTooSmall(
            f"image {img.width}x{img.height} smaller than descriptor footprint {min_side}x{min_side}"
        )
    nb = params.orientation_bins
    gx, gy = _gradients(img.data, params.smoothing_sigma)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    t = theta * (nb / (2 * np.pi))
    lo = np.floor(t)
    frac = t - lo
    b0 = lo.astype(int) % nb
    b1 = (b0 + 1) % nb

    h, w = img.data.shape
    lo_w = mag * (1.0 - frac)
    hi_w = mag * frac
    orient = np.empty((h, w, nb))
    for k in range(nb):
        orient[:, :, k] = np.where(b0 == k, lo_w, 0.0) + np.where(b1 == k, hi_w, 0.0)

    offsets, kernels = _cell_kernels(params)
    hist = np.empty((h, w, params.grid, params.grid, nb))
    for cy in range(params.grid):
        vert = _correlate_axis(orient, offsets, kernels[cy], axis=0)
        for cx in range(params.grid):
            hist[:, :, cy, cx, :] = _correlate_axis(vert, offsets, kernels[cx], axis=1)
    desc = hist.reshape(h, w, params.channels)
    return FeatureMap(normalize_descriptors(desc, params.clamp))


def normalize_descriptors(desc: np.ndarray, clamp: float) -> np.ndarray:
    """L2-normalise, clamp, renormalise; empty descriptors stay zero."""
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    live = norm > _ZERO_NORM
    out = np.where(live, desc / np.where(live, norm, 1.0), 0.0)
    np.minimum(out, clamp, out=out)
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    live = norm > 0.0
    return np.where(live, out / np.where(live, norm, 1.0), 0.0)


# Feature-map dump: magic, version, then H, W, C and float32 data.
_SFEA_MAGIC = b"SFEA"
_SFEA_VERSION = 1
_SFEA_HEADER = struct.Struct("<4sIIII")


def save_feature_map(path, fm: FeatureMap) -> None:
    header = _SFEA_HEADER.pack(_SFEA_MAGIC, _SFEA_VERSION, fm.height, fm.width, fm.channels)
    payload = np.ascontiguousarray(fm.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_feature_map(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if raw[:4] != _SFEA_MAGIC:
        raise BadMagic(f"{path}: not a feature-map file")
    if len(raw) < _SFEA_HEADER.size:
        raise CorruptPayload(f"{path}: truncated header")
    _, version, h, w, c = _SFEA_HEADER.unpack_from(raw)
    if version != _SFEA_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {_SFEA_VERSION}")
    if len(raw) != _SFEA_HEADER.size + 4 * h * w * c:
        raise CorruptPayload(f"{path}: payload length does not match header")
    data = np.frombuffer(raw, dtype="<f4", offset=_SFEA_HEADER.size).reshape(h, w, c)
    return FeatureMap(data.astype(np.float64))
