"""Synthetic data for desk-scale runs: textures, negative corpora and
semantic pairs that share an object shape under a known similarity map."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imagefeat import ImageGray, save_image


def texture(rng: np.random.Generator, shape: tuple[int, int], sigmas=(1.0, 3.0, 8.0)) -> np.ndarray:
    """Multi-scale smoothed noise rescaled to [0, 1]."""
    acc = np.zeros(shape)
    for s in sigmas:
        layer = gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        acc += layer / (layer.std() + 1e-12) * rng.uniform(0.3, 1.0)
    acc -= acc.min()
    return acc / max(acc.max(), 1e-12)


def translate(img: np.ndarray, dx: int, dy: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Shift content by (dx, dy); uncovered pixels get fresh texture (or zeros)."""
    out = texture(rng, img.shape) if rng is not None else np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


@dataclass(frozen=True)
class Similarity:
    """x' = scale * R(angle) (x - origin) + origin + shift, on (x, y) points."""

    scale: float
    angle: float
    origin: tuple[float, float]
    shift: tuple[float, float]

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        o = np.asarray(self.origin)
        return (pts - o) @ self.matrix().T + o + np.asarray(self.shift)

    def inverse(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        o = np.asarray(self.origin)
        return (pts - o - np.asarray(self.shift)) @ np.linalg.inv(self.matrix()).T + o


@dataclass(frozen=True)
class Blob:
    cx: float
    cy: float
    a: float
    b: float
    angle: float

    def boundary(self, t: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        x, y = self.a * np.cos(t), self.b * np.sin(t)
        return np.stack([self.cx + c * x - s * y, self.cy + s * x + c * y], axis=-1)


def random_shape(rng: np.random.Generator, width: int, height: int, n_blobs: int = 3) -> list[Blob]:
    m = min(width, height)
    blobs = []
    for _ in range(n_blobs):
        blobs.append(Blob(
            cx=rng.uniform(0.35, 0.65) * width,
            cy=rng.uniform(0.35, 0.65) * height,
            a=rng.uniform(0.10, 0.25) * m,
            b=rng.uniform(0.06, 0.16) * m,
            angle=rng.uniform(0, math.pi),
        ))
    return blobs


def shape_mask(blobs: list[Blob], width: int, height: int, warp: Similarity | None = None) -> np.ndarray:
    """Soft-edged union of the blobs, optionally pushed through ``warp``."""
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    if warp is not None:
        pts = warp.inverse(pts)
    scale = warp.scale if warp is not None else 1.0
    field = np.full(len(pts), -np.inf)
    for bl in blobs:
        c, s = math.cos(bl.angle), math.sin(bl.angle)
        dx, dy = pts[:, 0] - bl.cx, pts[:, 1] - bl.cy
        x, y = c * dx + s * dy, -s * dx + c * dy
        r = np.sqrt((x / bl.a) ** 2 + (y / bl.b) ** 2)
        # signed distance to the ellipse edge, approximately, in output pixels
        field = np.maximum(field, (1.0 - r) * min(bl.a, bl.b) * scale)
    return np.clip(field + 0.5, 0.0, 1.0).reshape(height, width)


def render(rng: np.random.Generator, mask: np.ndarray, polarity: float) -> np.ndarray:
    """Object over background, each with its own texture; the object is
    brighter when ``polarity > 0``."""
    h, w = mask.shape
    bg = 0.15 + 0.35 * texture(rng, (h, w))
    fg = 0.55 + 0.35 * texture(rng, (h, w), sigmas=(2.0, 6.0))
    if polarity < 0:
        bg, fg = 1.0 - bg, 1.0 - fg
    return np.clip(mask * fg + (1.0 - mask) * bg, 0.0, 1.0)


@dataclass
class SyntheticPair:
    source: np.ndarray
    target: np.ndarray
    warp: Similarity
    keypoints: np.ndarray  # (n, 2) source (x, y)
    truth: np.ndarray  # (n, 2) exact target positions
    annotations: np.ndarray  # (n_annotators, n, 2)


def semantic_pair(
    rng: np.random.Generator,
    width: int = 80,
    height: int = 64,
    n_keypoints: int = 10,
    n_annotators: int = 8,
    annotator_sd: float = 1.0,
    max_shift: float = 6.0,
) -> SyntheticPair:
    """Two renderings of one shape with independent textures; the target's
    shape is the source's under a random similarity."""
    blobs = random_shape(rng, width, height)
    warp = Similarity(
        scale=rng.uniform(0.9, 1.1),
        angle=rng.uniform(-0.12, 0.12),
        origin=(width / 2, height / 2),
        shift=tuple(rng.uniform(-max_shift, max_shift, 2)),
    )
    polarity = rng.choice([-1.0, 1.0])
    src = render(rng, shape_mask(blobs, width, height), polarity)
    tgt = render(rng, shape_mask(blobs, width, height, warp), polarity)

    # keypoints on the blob outlines, kept where both ends stay well inside
    margin = 4.0
    kps = []
    while len(kps) < n_keypoints:
        bl = blobs[rng.integers(len(blobs))]
        p = bl.boundary(np.array([rng.uniform(0, 2 * math.pi)]))[0]
        q = warp.apply(p)[0]
        if all(margin <= z[0] <= width - margin and margin <= z[1] <= height - margin for z in (p, q)):
            kps.append(p)
    kps = np.array(kps)
    truth = warp.apply(kps)
    noise = rng.normal(0.0, annotator_sd, (n_annotators,) + truth.shape)
    annots = np.clip(truth + noise, 0.0, [width, height])
    return SyntheticPair(src, tgt, warp, kps, truth, annots)


def negative_image(rng: np.random.Generator, width: int = 96, height: int = 96) -> np.ndarray:
    """A cluttered scene of random blobs over texture, for corpus statistics."""
    mask = np.zeros((height, width))
    for _ in range(rng.integers(1, 4)):
        mask = np.maximum(mask, shape_mask(random_shape(rng, width, height, n_blobs=2), width, height))
    return render(rng, mask, rng.choice([-1.0, 1.0]))


def write_corpus(directory, n_images: int, seed: int = 0, width: int = 96, height: int = 96) -> list[Path]:
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_images):
        p = directory / f"neg_{i:04d}.png"
        save_image(p, ImageGray(negative_image(rng, width, height)))
        paths.append(p)
    return paths


def write_benchmark(
    directory, n_pairs: int = 10, seed: int = 0, width: int = 80, height: int = 64, **kwargs
) -> Path:
    """Write ``n_pairs`` semantic pairs as PNGs plus ``annotations.json``."""
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(n_pairs):
        sp = semantic_pair(rng, width, height, **kwargs)
        src, tgt = f"pair{i:02d}_a.png", f"pair{i:02d}_b.png"
        save_image(directory / src, ImageGray(sp.source))
        save_image(directory / tgt, ImageGray(sp.target))
        kps = []
        for k in range(len(sp.keypoints)):
            kps.append({
                "id": str(k),
                "source_xy": [round(float(v), 3) for v in sp.keypoints[k]],
                "annotations": [[round(float(v), 3) for v in sp.annotations[a, k]]
                                for a in range(sp.annotations.shape[0])],
            })
        pairs.append({
            "source": src, "target": tgt,
            "source_size": [width, height], "target_size": [width, height],
            "keypoints": kps,
        })
    path = directory / "annotations.json"
    path.write_text(json.dumps({"pairs": pairs}, indent=1))
    return path
