"""Per-pixel LDA exemplar classifiers, sliding-window scoring and posteriors.

A detector patch is a ``detector_h x detector_w x C`` window flattened in
``(row, col, channel)`` order and centred on its pixel. For even sizes the
centre sits at index ``size // 2``. Positions outside the image contribute
zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DimensionMismatch, EmptyWindow
from .imagefeat import FeatureMap
from .statstore import CovarianceFactor

# Posteriors are kept strictly inside (0, 1) even where the logistic rounds.
_P_LO = np.finfo(np.float64).tiny
_P_HI = 1.0 - np.finfo(np.float64).epsneg


@dataclass(frozen=True)
class Window:
    """Half-open search rectangle ``[top, bottom) x [left, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    @classmethod
    def around(cls, r: int, c: int, radius: int) -> Window:
        return cls(r - radius, c - radius, r + radius + 1, c + radius + 1)

    def clip(self, height: int, width: int) -> Window:
        win = Window(max(self.top, 0), max(self.left, 0), min(self.bottom, height), min(self.right, width))
        if win.bottom <= win.top or win.right <= win.left:
            raise EmptyWindow(f"window {self} does not intersect a {height}x{width} image")
        return win


@dataclass
class LikelihoodMap:
    """Per-target-pixel values; ``valid`` marks positions that were evaluated.

    ``kind`` is ``"raw"`` (classifier score), ``"posterior"`` or ``"l1"`` (cost).
    """

    values: np.ndarray
    valid: np.ndarray
    kind: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class Exemplar(NamedTuple):
    w: np.ndarray
    bias: float


@dataclass(eq=False)
class ExemplarBank:
    """One LDA classifier per reference pixel, rows in row-major pixel order."""

    ref_height: int
    ref_width: int
    detector_h: int
    detector_w: int
    channels: int
    weights: np.ndarray
    bias: np.ndarray
    prior: float = 0.0

    def __len__(self) -> int:
        return self.weights.shape[0]

    def entry(self, r: int, c: int) -> Exemplar:
        i = r * self.ref_width + c
        return Exemplar(self.weights[i], float(self.bias[i]))


def _pad(fm: FeatureMap, detector_h: int, detector_w: int) -> np.ndarray:
    top, left = detector_h // 2, detector_w // 2
    return np.pad(fm.data, ((top, detector_h - 1 - top), (left, detector_w - 1 - left), (0, 0)))


def extract_patch(fm: FeatureMap, center: tuple[int, int], detector_h: int, detector_w: int) -> np.ndarray:
    r, c = center
    top, left = r - detector_h // 2, c - detector_w // 2
    out = np.zeros((detector_h, detector_w, fm.channels))
    r0, r1 = max(top, 0), min(top + detector_h, fm.height)
    c0, c1 = max(left, 0), min(left + detector_w, fm.width)
    if r0 < r1 and c0 < c1:
        out[r0 - top: r1 - top, c0 - left: c1 - left] = fm.data[r0:r1, c0:c1]
    return out.ravel()


def patch_matrix(
    fm: FeatureMap, detector_h: int, detector_w: int,
    rows: slice = slice(None), cols: slice = slice(None),
) -> np.ndarray:
    """Zero-padded patches for every pixel in ``fm[rows, cols]``, one per row."""
    view = sliding_window_view(_pad(fm, detector_h, detector_w), (detector_h, detector_w), axis=(0, 1))
    view = view[rows, cols]  # (h, w, C, dh, dw)
    h, w = view.shape[:2]
    return np.ascontiguousarray(view.transpose(0, 1, 3, 4, 2)).reshape(h * w, -1)


def learn_classifier(factor: CovarianceFactor, u_pos: np.ndarray) -> Exemplar:
    """LDA weights ``Sigma^{-1}(u_pos - mu_neg)`` and the calibration offset."""
    u_pos = np.asarray(u_pos, dtype=np.float64)
    if u_pos.shape != (factor.dim,):
        raise DimensionMismatch(f"positive mean has shape {u_pos.shape}, expected ({factor.dim},)")
    w = factor.solve(u_pos - factor.mean_neg)
    bias = 0.5 * float((u_pos + factor.mean_neg) @ w)
    return Exemplar(w, bias)


def learn_bank(
    factor: CovarianceFactor, fm_ref: FeatureMap, prior: float = 0.0, chunk: int = 4096
) -> ExemplarBank:
    """Train every reference pixel's classifier with batched solves."""
    if fm_ref.channels != factor.channels:
        raise DimensionMismatch(f"feature map has {fm_ref.channels} channels, covariance {factor.channels}")
    dh, dw = factor.detector_h, factor.detector_w
    h, w = fm_ref.shape
    weights = np.empty((h * w, factor.dim))
    bias = np.empty(h * w)
    rows_per_chunk = max(1, chunk // w)
    for r0 in range(0, h, rows_per_chunk):
        r1 = min(h, r0 + rows_per_chunk)
        u_pos = patch_matrix(fm_ref, dh, dw, rows=slice(r0, r1))
        sl = slice(r0 * w, r1 * w)
        wts = factor.solve((u_pos - factor.mean_neg).T).T
        weights[sl] = wts
        bias[sl] = 0.5 * np.einsum("ij,ij->i", u_pos + factor.mean_neg, wts)
    return ExemplarBank(h, w, dh, dw, factor.channels, weights, bias, float(prior))


def _check_weights(w: np.ndarray, fm: FeatureMap, detector_h: int, detector_w: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (detector_h * detector_w * fm.channels,):
        raise DimensionMismatch(
            f"weights of length {w.size} do not fit a {detector_h}x{detector_w}x{fm.channels} detector"
        )
    return w.reshape(detector_h, detector_w, fm.channels)


def _region(fm: FeatureMap, window: Window | None) -> Window:
    if window is None:
        return Window(0, 0, fm.height, fm.width)
    return window.clip(fm.height, fm.width)


def _valid_only_mask(shape: tuple[int, int], detector_h: int, detector_w: int) -> np.ndarray:
    h, w = shape
    top, left = detector_h // 2, detector_w // 2
    mask = np.zeros(shape, dtype=bool)
    mask[top: h - (detector_h - 1 - top), left: w - (detector_w - 1 - left)] = True
    return mask


def likelihood_map(
    w: np.ndarray,
    fm_tgt: FeatureMap,
    window: Window | None = None,
    detector: tuple[int, int] = (5, 5),
    border: str = "zero",
) -> LikelihoodMap:
    """Slide the classifier over the target: ``raw[t] = w . patch(t)``.

    This is a correlation (no kernel flip). Only positions inside ``window``
    are evaluated; with ``border="valid"`` positions whose patch leaves the
    image are also marked invalid.
    """
    dh, dw = detector
    kernel = _check_weights(w, fm_tgt, dh, dw)
    win = _region(fm_tgt, window)
    padded = _pad(fm_tgt, dh, dw)
    h, wd = win.bottom - win.top, win.right - win.left
    acc = np.zeros((h, wd))
    for a in range(dh):
        for b in range(dw):
            block = padded[win.top + a: win.top + a + h, win.left + b: win.left + b + wd]
            acc += block @ kernel[a, b]
    values = np.zeros(fm_tgt.shape)
    valid = np.zeros(fm_tgt.shape, dtype=bool)
    values[win.top:win.bottom, win.left:win.right] = acc
    valid[win.top:win.bottom, win.left:win.right] = True
    if border == "valid":
        valid &= _valid_only_mask(fm_tgt.shape, dh, dw)
    elif border != "zero":
        raise ValueError(f"unknown border policy {border!r}")
    values[~valid] = 0.0
    return LikelihoodMap(values, valid, "raw")


def posterior_from_scores(raw: np.ndarray, bias, prior: float = 0.0) -> np.ndarray:
    """Logistic posterior of ``y = raw - bias + prior``, kept inside (0, 1)."""
    p = expit(np.asarray(raw) - bias + prior)
    return np.clip(p, _P_LO, _P_HI)


def posterior_map(
    entry: Exemplar,
    fm_tgt: FeatureMap,
    prior: float = 0.0,
    window: Window | None = None,
    detector: tuple[int, int] = (5, 5),
    border: str = "zero",
) -> LikelihoodMap:
    raw = likelihood_map(entry.w, fm_tgt, window, detector, border)
    values = np.where(raw.valid, posterior_from_scores(raw.values, entry.bias, prior), 0.0)
    return LikelihoodMap(values, raw.valid, "posterior")


def l1_unary(
    fm_ref: FeatureMap,
    i: tuple[int, int],
    fm_tgt: FeatureMap,
    window: Window | None = None,
    detector: tuple[int, int] = (1, 1),
) -> LikelihoodMap:
    """L1 descriptor distance between reference pixel ``i`` and every target pixel."""
    if fm_ref.channels != fm_tgt.channels:
        raise DimensionMismatch(f"{fm_ref.channels} vs {fm_tgt.channels} channels")
    dh, dw = detector
    ref = extract_patch(fm_ref, i, dh, dw).reshape(dh, dw, -1)
    win = _region(fm_tgt, window)
    padded = _pad(fm_tgt, dh, dw)
    h, wd = win.bottom - win.top, win.right - win.left
    acc = np.zeros((h, wd))
    for a in range(dh):
        for b in range(dw):
            block = padded[win.top + a: win.top + a + h, win.left + b: win.left + b + wd]
            acc += np.abs(block - ref[a, b]).sum(axis=-1)
    values = np.zeros(fm_tgt.shape)
    valid = np.zeros(fm_tgt.shape, dtype=bool)
    values[win.top:win.bottom, win.left:win.right] = acc
    valid[win.top:win.bottom, win.left:win.right] = True
    return LikelihoodMap(values, valid, "l1")


def score_all(bank: ExemplarBank, fm_tgt: FeatureMap, block: int = 1024) -> Iterator[tuple[int, np.ndarray]]:
    """Full sliding-window scores of every classifier over the whole target.

    Yields ``(first_classifier, scores)`` with ``scores`` of shape
    ``(n, target_pixels)``; blocks bound memory for large banks.
    """
    if fm_tgt.channels != bank.channels:
        raise DimensionMismatch(f"{fm_tgt.channels} vs {bank.channels} channels")
    patches_t = patch_matrix(fm_tgt, bank.detector_h, bank.detector_w).T.copy()
    for start in range(0, len(bank), block):
        yield start, bank.weights[start:start + block] @ patches_t


def best_matches(bank: ExemplarBank, fm_tgt: FeatureMap, block: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Unregularised best target pixel per classifier.

    Returns (row-major target index, posterior) arrays of length ``len(bank)``.
    The posterior is monotone in the raw score, so the argmax is taken on
    raw scores.
    """
    index = np.empty(len(bank), dtype=np.int64)
    post = np.empty(len(bank))
    for start, scores in score_all(bank, fm_tgt, block):
        best = np.argmax(scores, axis=1)
        sl = slice(start, start + scores.shape[0])
        index[sl] = best
        post[sl] = posterior_from_scores(scores[np.arange(len(best)), best], bank.bias[sl], bank.prior)
    return index, post


def l1_best_matches(fm_ref: FeatureMap, fm_tgt: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Unregularised minimum-L1 target pixel per reference pixel (1x1 support)."""
    if fm_ref.channels != fm_tgt.channels:
        raise DimensionMismatch(f"{fm_ref.channels} vs {fm_tgt.channels} channels")
    ref = fm_ref.data.reshape(-1, fm_ref.channels)
    tgt = fm_tgt.data.reshape(-1, fm_tgt.channels)
    index = np.empty(ref.shape[0], dtype=np.int64)
    cost = np.empty(ref.shape[0])
    block = max(1, 2**24 // tgt.size)
    for start in range(0, ref.shape[0], block):
        d = np.abs(ref[start:start + block, None, :] - tgt[None]).sum(axis=-1)
        best = np.argmin(d, axis=1)
        index[start:start + block] = best
        cost[start:start + block] = d[np.arange(len(best)), best]
    return index, cost


def save_map_pgm(path, lmap: LikelihoodMap) -> None:
    """16-bit binary PGM of a posterior map (invalid pixels written as 0)."""
    vals = np.where(lmap.valid, np.clip(lmap.values, 0.0, 1.0), 0.0)
    data = np.rint(vals * 65535.0).astype(">u2")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + data.tobytes())
