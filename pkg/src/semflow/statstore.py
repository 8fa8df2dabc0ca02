"""Stationary negative-class statistics and the structured detector covariance.

Feature values are accumulated as fixed-point integers (``FRAC_BITS``
fractional bits), so every counter is an exact integer sum. Merging
accumulators is therefore exactly commutative and associative, which keeps
corpus-parallel accumulation bit-identical to a sequential pass.

Index layout everywhere is ``(row, col, channel)`` row-major. The tensor
entry ``g[di, dj, p, q]`` is the centred second moment between channel ``p``
at pixel ``(r, c)`` and channel ``q`` at pixel ``(r + di, c + dj)``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    BadMagic,
    BandwidthTooSmall,
    ChannelMismatch,
    CorruptPayload,
    ImageSmallerThanBandwidth,
    InsufficientData,
    IoError,
    NonFinite,
    NotPositiveDefinite,
    ShapeMismatch,
    VersionMismatch,
)
from .imagefeat import FeatureMap

FRAC_BITS = 16
_SCALE = float(1 << FRAC_BITS)
# Each float64 product is < 2**(2*FRAC_BITS); keep every BLAS partial sum
# below 2**53 so that it stays an exact integer.
_MAX_ROWS_PER_PRODUCT = 1 << (53 - 2 * FRAC_BITS)
# Keeps int64 product sums below 2**63.
_MAX_PAIRS = 1 << (63 - 2 * FRAC_BITS)

CHOLESKY = "cholesky"
EXPLICIT_INVERSE = "explicit_inverse"
FACTOR_KINDS = (CHOLESKY, EXPLICIT_INVERSE)


@dataclass(eq=False)
class StatsAccumulator:
    """Running fixed-point sums over a corpus of feature maps.

    ``counts[di + B, dj + B]`` is the number of pixel pairs seen at offset
    ``(di, dj)``; ``counts[B, B]`` is the number of pixels. ``raw`` holds the
    matching sums of channel products and ``sums`` the per-channel sums.
    """

    channels: int
    bandwidth: int
    n_images: int = 0
    counts: np.ndarray = field(default=None)
    sums: np.ndarray = field(default=None)
    raw: np.ndarray = field(default=None)

    def __post_init__(self):
        side = 2 * self.bandwidth + 1
        if self.counts is None:
            self.counts = np.zeros((side, side), dtype=np.int64)
        if self.sums is None:
            self.sums = np.zeros(self.channels, dtype=np.int64)
        if self.raw is None:
            self.raw = np.zeros((side, side, self.channels, self.channels), dtype=np.int64)
        if self.counts.shape != (side, side) or self.sums.shape != (self.channels,):
            raise ShapeMismatch("accumulator arrays do not match channels/bandwidth")
        if self.raw.shape != (side, side, self.channels, self.channels):
            raise ShapeMismatch("product tensor does not match channels/bandwidth")

    def copy(self) -> StatsAccumulator:
        return StatsAccumulator(
            self.channels, self.bandwidth, self.n_images,
            self.counts.copy(), self.sums.copy(), self.raw.copy(),
        )

    def equals(self, other: StatsAccumulator) -> bool:
        return (
            self.channels == other.channels
            and self.bandwidth == other.bandwidth
            and self.n_images == other.n_images
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.sums, other.sums)
            and np.array_equal(self.raw, other.raw)
        )

    def add(self, fm: FeatureMap) -> None:
        """Accumulate one feature map in place."""
        if fm.channels != self.channels:
            raise ChannelMismatch(f"feature map has {fm.channels} channels, accumulator {self.channels}")
        B = self.bandwidth
        h, w = fm.shape
        if h <= B or w <= B:
            raise ImageSmallerThanBandwidth(f"{h}x{w} map cannot hold offsets up to {B}")
        if not np.all(np.isfinite(fm.data)) or np.abs(fm.data).max(initial=0.0) > 1.0:
            raise ValueError("feature values must be finite and lie in [-1, 1]")
        if self.counts[B, B] + h * w > _MAX_PAIRS:
            raise OverflowError("accumulator capacity exceeded")

        q = np.rint(fm.data * _SCALE)
        C = self.channels
        for di in range(0, B + 1):
            for dj in range(-B, B + 1):
                if di == 0 and dj < 0:
                    continue
                c0, c1 = max(0, -dj), min(w, w - dj)
                a = q[: h - di, c0:c1].reshape(-1, C)
                b = q[di:, c0 + dj: c1 + dj].reshape(-1, C)
                prod = _exact_gram(a, b)
                if di == 0 and dj == 0:
                    self.raw[B, B] += prod
                else:
                    self.raw[B + di, B + dj] += prod
                    self.raw[B - di, B - dj] += prod.T
                n = a.shape[0]
                self.counts[B + di, B + dj] += n
                if di or dj:
                    self.counts[B - di, B - dj] += n
        self.sums += q.reshape(-1, C).sum(axis=0).astype(np.int64)
        self.n_images += 1


def _exact_gram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer-exact ``a.T @ b`` for integer-valued float arrays."""
    out = np.zeros((a.shape[1], b.shape[1]), dtype=np.int64)
    for start in range(0, a.shape[0], _MAX_ROWS_PER_PRODUCT):
        stop = start + _MAX_ROWS_PER_PRODUCT
        out += (a[start:stop].T @ b[start:stop]).astype(np.int64)
    return out


def empty_stats(channels: int, bandwidth: int) -> StatsAccumulator:
    if channels < 1 or bandwidth < 0:
        raise ValueError("channels must be >= 1 and bandwidth >= 0")
    return StatsAccumulator(channels, bandwidth)


def accumulate_stats(fm: FeatureMap, acc: StatsAccumulator) -> StatsAccumulator:
    """Return a new accumulator with ``fm`` added; neither input is modified."""
    out = acc.copy()
    out.add(fm)
    return out


def merge_stats(a: StatsAccumulator, b: StatsAccumulator) -> StatsAccumulator:
    if a.channels != b.channels or a.bandwidth != b.bandwidth:
        raise ShapeMismatch(
            f"cannot merge ({a.channels} ch, B={a.bandwidth}) with ({b.channels} ch, B={b.bandwidth})"
        )
    if a.counts[a.bandwidth, a.bandwidth] + b.counts[b.bandwidth, b.bandwidth] > _MAX_PAIRS:
        raise OverflowError("accumulator capacity exceeded")
    return StatsAccumulator(
        a.channels, a.bandwidth, a.n_images + b.n_images,
        a.counts + b.counts, a.sums + b.sums, a.raw + b.raw,
    )


@dataclass(frozen=True, eq=False)
class DisplacementTensor:
    """Centred second moments; ``values[di + B, dj + B, p, q] = g[di, dj, p, q]``."""

    bandwidth: int
    channels: int
    values: np.ndarray

    def at(self, di: int, dj: int) -> np.ndarray:
        B = self.bandwidth
        if abs(di) > B or abs(dj) > B:
            raise IndexError(f"offset ({di}, {dj}) outside bandwidth {B}")
        return self.values[di + B, dj + B]


def finalize(acc: StatsAccumulator) -> tuple[np.ndarray, DisplacementTensor]:
    """Per-channel mean and the centred displacement tensor."""
    if acc.counts.min() < 2:
        raise InsufficientData("every displacement bin needs at least two pixel pairs")
    B = acc.bandwidth
    mean = acc.sums.astype(np.float64) / _SCALE / acc.counts[B, B]
    second = acc.raw.astype(np.float64) / (_SCALE * _SCALE)
    second /= acc.counts[:, :, None, None].astype(np.float64)
    g = second - np.outer(mean, mean)[None, None]
    # g[d, p, q] and g[-d, q, p] estimate the same quantity.
    g = 0.5 * (g + g[::-1, ::-1].transpose(0, 1, 3, 2))
    return mean, DisplacementTensor(B, acc.channels, g)


def detector_positions(detector_h: int, detector_w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(detector_h), np.arange(detector_w), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def build_covariance(tensor: DisplacementTensor, detector_h: int, detector_w: int) -> np.ndarray:
    """Dense covariance of a detector_h x detector_w x C patch.

    Entry ``((u, v, p), (i, j, q))`` is ``g[i - u, j - v, p, q]``.
    """
    if detector_h < 1 or detector_w < 1:
        raise ValueError("detector dimensions must be >= 1")
    B = tensor.bandwidth
    if detector_h - 1 > B or detector_w - 1 > B:
        raise BandwidthTooSmall(f"{detector_h}x{detector_w} detector needs bandwidth >= {max(detector_h, detector_w) - 1}, have {B}")
    pos = detector_positions(detector_h, detector_w)
    di = pos[None, :, 0] - pos[:, None, 0]
    dj = pos[None, :, 1] - pos[:, None, 1]
    blocks = tensor.values[di + B, dj + B]  # (P, P, C, C)
    n_pos, C = len(pos), tensor.channels
    return np.ascontiguousarray(blocks.transpose(0, 2, 1, 3)).reshape(n_pos * C, n_pos * C)


def regularize_psd(
    sigma: np.ndarray, rel_floor: float = 1e-6, abs_floor: float = 1e-8
) -> tuple[np.ndarray, float]:
    """Shift the diagonal so the matrix is strictly positive definite.

    The shift is ``max(0, -lambda_min) + delta`` where ``delta`` is
    ``rel_floor * trace / dim``, or ``abs_floor`` when the trace is not
    positive.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("covariance must be square")
    if not np.all(np.isfinite(sigma)):
        raise NonFinite("covariance contains non-finite entries")
    scale = max(1.0, float(np.abs(sigma).max(initial=0.0)))
    if np.abs(sigma - sigma.T).max(initial=0.0) > 1e-9 * scale:
        raise ValueError("covariance is not symmetric")
    dim = sigma.shape[0]
    lam_min = float(scipy.linalg.eigvalsh(sigma, subset_by_index=[0, 0])[0])
    trace = float(np.trace(sigma))
    delta = rel_floor * trace / dim if trace > 0 else abs_floor
    shift = max(0.0, -lam_min) + delta
    reg = sigma.copy()
    reg[np.diag_indices(dim)] += shift
    return reg, shift


@dataclass(frozen=True, eq=False)
class CovarianceFactor:
    """Factorised regularised covariance for one detector geometry."""

    detector_h: int
    detector_w: int
    channels: int
    factor_kind: str
    factor_data: np.ndarray
    mean_neg: np.ndarray
    eig_shift: float = 0.0
    covariance: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.factor_data.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Return ``Sigma_reg^{-1} b`` for a vector or a (dim, k) matrix."""
        if self.factor_kind == CHOLESKY:
            return scipy.linalg.cho_solve((self.factor_data, True), b, check_finite=False)
        return self.factor_data @ b


def factorize(
    sigma_reg: np.ndarray,
    kind: str = CHOLESKY,
    *,
    detector_h: int = 1,
    detector_w: int = 1,
    mean_neg: np.ndarray | None = None,
    eig_shift: float = 0.0,
    keep_covariance: bool = True,
) -> CovarianceFactor:
    if kind not in FACTOR_KINDS:
        raise ValueError(f"unknown factor kind {kind!r}")
    sigma_reg = np.asarray(sigma_reg, dtype=np.float64)
    dim = sigma_reg.shape[0]
    if dim % (detector_h * detector_w):
        raise ValueError("covariance size is not a multiple of the detector area")
    channels = dim // (detector_h * detector_w)
    try:
        chol = scipy.linalg.cholesky(sigma_reg, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if kind == CHOLESKY:
        data = chol
    else:
        data = scipy.linalg.cho_solve((chol, True), np.eye(dim))
        data = 0.5 * (data + data.T)
    if mean_neg is None:
        mean_neg = np.zeros(dim)
    mean_neg = np.asarray(mean_neg, dtype=np.float64)
    if mean_neg.shape == (channels,):
        mean_neg = np.tile(mean_neg, detector_h * detector_w)
    if mean_neg.shape != (dim,):
        raise ShapeMismatch(f"mean has shape {mean_neg.shape}, expected ({dim},)")
    return CovarianceFactor(
        detector_h, detector_w, channels, kind, data, mean_neg, eig_shift,
        sigma_reg if keep_covariance else None,
    )


def detector_factor(
    mean: np.ndarray,
    tensor: DisplacementTensor,
    detector_h: int = 5,
    detector_w: int = 5,
    kind: str = CHOLESKY,
    rel_floor: float = 1e-6,
) -> CovarianceFactor:
    """Build, regularise and factorise the covariance of one detector size."""
    sigma = build_covariance(tensor, detector_h, detector_w)
    reg, shift = regularize_psd(sigma, rel_floor=rel_floor)
    return factorize(
        reg, kind, detector_h=detector_h, detector_w=detector_w,
        mean_neg=mean, eig_shift=shift,
    )


# Stats file: magic, version, channels, bandwidth, frac_bits, n_images,
# per-bin pair counts, per-channel sums, product tensor, CRC32 trailer.
_SCOV_MAGIC = b"SCOV"
_SCOV_VERSION = 1
_SCOV_PREFIX = struct.Struct("<4sI")
_SCOV_HEADER = struct.Struct("<IIIQ")


def save_stats(acc: StatsAccumulator, path) -> None:
    body = b"".join([
        _SCOV_HEADER.pack(acc.channels, acc.bandwidth, FRAC_BITS, acc.n_images),
        np.ascontiguousarray(acc.counts, dtype="<u8").tobytes(),
        np.ascontiguousarray(acc.sums, dtype="<i8").tobytes(),
        np.ascontiguousarray(acc.raw, dtype="<i8").tobytes(),
    ])
    crc = struct.pack("<I", zlib.crc32(body))
    try:
        Path(path).write_bytes(_SCOV_PREFIX.pack(_SCOV_MAGIC, _SCOV_VERSION) + body + crc)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_stats(path) -> StatsAccumulator:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != _SCOV_MAGIC:
        raise BadMagic(f"{path}: not a stats file")
    if len(blob) < _SCOV_PREFIX.size + _SCOV_HEADER.size + 4:
        raise CorruptPayload(f"{path}: truncated")
    _, version = _SCOV_PREFIX.unpack_from(blob)
    if version != _SCOV_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {_SCOV_VERSION}")
    body = blob[_SCOV_PREFIX.size:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptPayload(f"{path}: checksum mismatch")
    channels, bandwidth, frac_bits, n_images = _SCOV_HEADER.unpack_from(body)
    if frac_bits != FRAC_BITS:
        raise VersionMismatch(f"{path}: fixed-point scale 2^{frac_bits}, expected 2^{FRAC_BITS}")
    side = 2 * bandwidth + 1
    n_counts, n_raw = side * side, side * side * channels * channels
    expected = _SCOV_HEADER.size + 8 * (n_counts + channels + n_raw)
    if len(body) != expected:
        raise CorruptPayload(f"{path}: payload length does not match header")
    off = _SCOV_HEADER.size
    counts = np.frombuffer(body, "<u8", n_counts, off).astype(np.int64).reshape(side, side)
    off += 8 * n_counts
    sums = np.frombuffer(body, "<i8", channels, off).astype(np.int64)
    off += 8 * channels
    raw = np.frombuffer(body, "<i8", n_raw, off).astype(np.int64).reshape(side, side, channels, channels)
    return StatsAccumulator(channels, bandwidth, n_images, counts, sums, raw)
