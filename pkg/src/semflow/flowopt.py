"""Discrete flow optimisation over windowed cost volumes.

The objective over integer displacement fields ``(u, v)`` is::

    E = sum_i cost_i(u_i, v_i)
        + small_disp_weight * sum_i (|u_i| + |v_i|)
        + lam * sum_{i~j} (min(|u_i - u_j|, trunc) + min(|v_i - v_j|, trunc))

over 4-connected neighbours. Each pixel's candidate displacements are a
``(2R+1)^2`` window around a per-pixel centre. Labels are ordered row-major
over ``(dv, du)``.

Inference is min-sum belief propagation on joint ``(u, v)`` labels. The
pairwise term splits into a u part and a v part, so each message is computed
with two 1-D truncated-L1 distance transforms (along u, then along v) in
time linear in the label count.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.ndimage import gaussian_filter
from scipy.special import expit
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    AllInfiniteCosts,
    BadMagic,
    CorruptPayload,
    DimensionMismatch,
    FlowOutsideVolume,
    IoError,
    PyramidTooDeep,
    VersionMismatch,
)
from .exemplar import ExemplarBank, _pad, learn_bank
from .imagefeat import FeatureMap, ImageGray
from .statstore import CovarianceFactor

# Cost assigned to displacements that leave the target image.
INF_COST = 1e10
# Posterior clamp before taking -log.
POSTERIOR_CLAMP = 1e-12
# Refuse cost volumes larger than this many entries.
MAX_VOLUME_ENTRIES = 1 << 28


@dataclass
class FlowField:
    """Integer displacement per reference pixel: pixel (r, c) maps to (r + v, c + u)."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    target_shape: tuple[int, int]

    @classmethod
    def zeros(cls, shape: tuple[int, int], target_shape: tuple[int, int]) -> FlowField:
        return cls(
            np.zeros(shape, np.int32), np.zeros(shape, np.int32),
            np.ones(shape, bool), tuple(target_shape),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def inside_target(self) -> np.ndarray:
        rows, cols = np.indices(self.shape)
        tr, tc = rows + self.v, cols + self.u
        P, Q = self.target_shape
        return (tr >= 0) & (tr < P) & (tc >= 0) & (tc < Q)

    def equals(self, other: FlowField) -> bool:
        return (
            self.target_shape == other.target_shape
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.valid, other.valid)
        )


@dataclass(eq=False)
class CostVolume:
    costs: np.ndarray  # (H, W, K)
    radius: int
    center_u: np.ndarray
    center_v: np.ndarray
    target_shape: tuple[int, int]
    cost_kind: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape[:2]

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def n_labels(self) -> int:
        return self.side ** 2

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """(du, dv) of every label."""
        k = np.arange(self.n_labels)
        return k % self.side - self.radius, k // self.side - self.radius

    def label_displacements(self) -> tuple[np.ndarray, np.ndarray]:
        """Total (u, v) of every label at every pixel, shape (H, W, K)."""
        du, dv = self.offsets()
        return self.center_u[..., None] + du, self.center_v[..., None] + dv

    def labels_of(self, flow: FlowField) -> np.ndarray:
        if flow.shape != self.shape:
            raise FlowOutsideVolume(f"flow {flow.shape} vs volume {self.shape}")
        du = flow.u - self.center_u
        dv = flow.v - self.center_v
        R = self.radius
        if np.any(np.abs(du) > R) or np.any(np.abs(dv) > R):
            raise FlowOutsideVolume("flow displacement outside the volume windows")
        return (dv + R) * self.side + (du + R)

    def flow_of(self, labels: np.ndarray) -> FlowField:
        du, dv = self.offsets()
        u = (self.center_u + du[labels]).astype(np.int32)
        v = (self.center_v + dv[labels]).astype(np.int32)
        chosen = np.take_along_axis(self.costs, labels[..., None], axis=-1)[..., 0]
        return FlowField(u, v, chosen < INF_COST, self.target_shape)

    def init_flow(self) -> FlowField:
        """The flow sitting at every window centre."""
        return FlowField(
            self.center_u.astype(np.int32), self.center_v.astype(np.int32),
            np.ones(self.shape, bool), self.target_shape,
        )


@dataclass(frozen=True)
class FlowParams:
    lam: float = 1.0
    trunc: float = 10.0
    small_disp_weight: float = 0.02
    levels: int | None = None
    window_radius: int = 5
    coarse_radius: int | None = None
    bp_iters: int = 40
    coarsest_dim: int = 16
    polish_sweeps: int = 20
    bp_patience: int = 10

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lam must be >= 0")
        if not self.trunc > 0:
            raise ValueError("trunc must be > 0")
        if not self.small_disp_weight >= 0:
            raise ValueError("small_disp_weight must be >= 0")
        if self.levels is not None and self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.window_radius < 0:
            raise ValueError("window_radius must be >= 0")
        if self.coarse_radius is not None and self.coarse_radius < 0:
            raise ValueError("coarse_radius must be >= 0")
        if self.bp_iters < 1:
            raise ValueError("bp_iters must be >= 1")
        if self.coarsest_dim < 1:
            raise ValueError("coarsest_dim must be >= 1")
        if self.polish_sweeps < 0:
            raise ValueError("polish_sweeps must be >= 0")
        if self.bp_patience < 1:
            raise ValueError("bp_patience must be >= 1")


# ---------------------------------------------------------------- unaries


@dataclass(frozen=True, eq=False)
class L1Source:
    fm_ref: FeatureMap
    fm_tgt: FeatureMap
    detector: tuple[int, int] = (1, 1)


@dataclass(frozen=True, eq=False)
class LdaSource:
    bank: ExemplarBank
    fm_tgt: FeatureMap
    prior: float | None = None


@dataclass(frozen=True, eq=False)
class L1Unary:
    """SIFT Flow style descriptor distance."""

    detector: tuple[int, int] = (1, 1)

    def source(self, fm_ref: FeatureMap, fm_tgt: FeatureMap) -> L1Source:
        return L1Source(fm_ref, fm_tgt, self.detector)


@dataclass(frozen=True, eq=False)
class LdaUnary:
    """Exemplar LDA classifiers; re-learned on each pyramid level."""

    factor: CovarianceFactor
    prior: float = 0.0

    @property
    def detector(self) -> tuple[int, int]:
        return self.factor.detector_h, self.factor.detector_w

    def source(self, fm_ref: FeatureMap, fm_tgt: FeatureMap) -> LdaSource:
        return LdaSource(learn_bank(self.factor, fm_ref, self.prior), fm_tgt, self.prior)


def _centers(shape, centers) -> tuple[np.ndarray, np.ndarray]:
    if centers is None:
        return np.zeros(shape, np.int64), np.zeros(shape, np.int64)
    cu, cv = (np.asarray(c, dtype=np.int64) for c in centers)
    if cu.shape != shape or cv.shape != shape:
        raise DimensionMismatch(f"centre offsets {cu.shape} do not match reference {shape}")
    return cu, cv


def build_cost_volume(source, window_radius: int, centers=None) -> CostVolume:
    """Unary costs over a window around each pixel's centre offset.

    ``centers`` is ``(center_u, center_v)`` or ``None`` for zero offsets.
    LDA costs are ``-log p`` with the posterior clamped to
    ``[1e-12, 1 - 1e-12]``. Displacements leaving the target cost
    ``INF_COST``.
    """
    if window_radius < 0:
        raise ValueError("window_radius must be >= 0")
    if isinstance(source, L1Source):
        ref_shape, fm_tgt = source.fm_ref.shape, source.fm_tgt
        if source.fm_ref.channels != fm_tgt.channels:
            raise DimensionMismatch(f"{source.fm_ref.channels} vs {fm_tgt.channels} channels")
    elif isinstance(source, LdaSource):
        ref_shape, fm_tgt = (source.bank.ref_height, source.bank.ref_width), source.fm_tgt
        if source.bank.channels != fm_tgt.channels:
            raise DimensionMismatch(f"{source.bank.channels} vs {fm_tgt.channels} channels")
    else:
        raise TypeError(f"unsupported unary source {type(source).__name__}")
    K = (2 * window_radius + 1) ** 2
    if ref_shape[0] * ref_shape[1] * K > MAX_VOLUME_ENTRIES:
        raise ValueError("cost volume too large; use more pyramid levels or a smaller radius")
    cu, cv = _centers(ref_shape, centers)
    if isinstance(source, L1Source):
        costs = _l1_costs(source, cu, cv, window_radius)
        kind = "l1"
    else:
        prior = source.bank.prior if source.prior is None else source.prior
        raw, inside = _lda_raw(source.bank, fm_tgt, cu, cv, window_radius)
        y = raw - source.bank.bias.reshape(ref_shape)[..., None] + prior
        p = np.clip(expit(y), POSTERIOR_CLAMP, 1.0 - POSTERIOR_CLAMP)
        costs = np.where(inside, -np.log(p), INF_COST)
        kind = "lda_negloglik"
    return CostVolume(costs, window_radius, cu, cv, tuple(fm_tgt.shape), kind)


def _targets(shape, cu, cv, radius):
    """Target rows/cols for every (pixel, label) and the in-target mask."""
    S = 2 * radius + 1
    k = np.arange(S * S)
    rows, cols = np.indices(shape)
    tr = (rows + cv)[..., None] + (k // S - radius)
    tc = (cols + cu)[..., None] + (k % S - radius)
    return tr, tc


def _l1_costs(src: L1Source, cu, cv, radius) -> np.ndarray:
    H, W = src.fm_ref.shape
    P, Q = src.fm_tgt.shape
    dh, dw = src.detector
    tr, tc = _targets((H, W), cu, cv, radius)
    inside = (tr >= 0) & (tr < P) & (tc >= 0) & (tc < Q)
    trc, tcc = np.clip(tr, 0, P - 1), np.clip(tc, 0, Q - 1)
    K = tr.shape[-1]
    costs = np.zeros((H, W, K))
    if (dh, dw) == (1, 1):
        ref, tgt = src.fm_ref.data, src.fm_tgt.data
        for k in range(K):
            costs[..., k] = np.abs(ref - tgt[trc[..., k], tcc[..., k]]).sum(axis=-1)
    else:
        ref_pad, tgt_pad = _pad(src.fm_ref, dh, dw), _pad(src.fm_tgt, dh, dw)
        for k in range(K):
            for a in range(dh):
                for b in range(dw):
                    costs[..., k] += np.abs(
                        ref_pad[a:a + H, b:b + W] - tgt_pad[trc[..., k] + a, tcc[..., k] + b]
                    ).sum(axis=-1)
    return np.where(inside, costs, INF_COST)


def _lda_raw(bank: ExemplarBank, fm_tgt: FeatureMap, cu, cv, radius, tile: int = 8):
    """Raw classifier scores over every pixel's window.

    Pixels are processed in tiles; one GEMM scores a tile's classifiers
    against every target patch in the bounding box of the tile's windows.
    Tiles whose box is much larger than their windows are split.
    """
    H, W = bank.ref_height, bank.ref_width
    P, Q = fm_tgt.shape
    dh, dw = bank.detector_h, bank.detector_w
    S = 2 * radius + 1
    K = S * S
    view = sliding_window_view(_pad(fm_tgt, dh, dw), (dh, dw), axis=(0, 1))
    tr, tc = _targets((H, W), cu, cv, radius)
    inside = (tr >= 0) & (tr < P) & (tc >= 0) & (tc < Q)
    raw = np.zeros((H, W, K))

    def run(r0, r1, c0, c1):
        br = tr[r0:r1, c0:c1]
        bc = tc[r0:r1, c0:c1]
        ins = inside[r0:r1, c0:c1]
        if not ins.any():
            return
        top, bottom = int(br[ins].min()), int(br[ins].max()) + 1
        left, right = int(bc[ins].min()), int(bc[ins].max()) + 1
        n = (r1 - r0) * (c1 - c0)
        area = (bottom - top) * (right - left)
        if n > 1 and area > 4 * K:
            if r1 - r0 >= c1 - c0:
                mid = (r0 + r1) // 2
                run(r0, mid, c0, c1)
                run(mid, r1, c0, c1)
            else:
                mid = (c0 + c1) // 2
                run(r0, r1, c0, mid)
                run(r0, r1, mid, c1)
            return
        patches = view[top:bottom, left:right]
        patches = np.ascontiguousarray(patches.transpose(0, 1, 3, 4, 2)).reshape(area, -1)
        idx = (np.arange(r0, r1)[:, None] * W + np.arange(c0, c1)[None, :]).ravel()
        scores = bank.weights[idx] @ patches.T  # (n, area)
        local = (np.clip(br, top, bottom - 1) - top) * (right - left) + (np.clip(bc, left, right - 1) - left)
        raw[r0:r1, c0:c1] = np.take_along_axis(scores, local.reshape(n, K), axis=1).reshape(r1 - r0, c1 - c0, K)

    for r0 in range(0, H, tile):
        for c0 in range(0, W, tile):
            run(r0, min(H, r0 + tile), c0, min(W, c0 + tile))
    return np.where(inside, raw, 0.0), inside


# ------------------------------------------------------------------ energy


def _pairwise(a: np.ndarray, b: np.ndarray, trunc: float) -> np.ndarray:
    return np.minimum(np.abs(a - b), trunc)


def _label_energy(labels: np.ndarray, vol: CostVolume, params: FlowParams) -> float:
    du, dv = vol.offsets()
    u = vol.center_u + du[labels]
    v = vol.center_v + dv[labels]
    unary = np.take_along_axis(vol.costs, labels[..., None], axis=-1).sum()
    small = params.small_disp_weight * (np.abs(u).sum() + np.abs(v).sum())
    T = params.trunc
    pair = (
        _pairwise(u[1:], u[:-1], T).sum() + _pairwise(v[1:], v[:-1], T).sum()
        + _pairwise(u[:, 1:], u[:, :-1], T).sum() + _pairwise(v[:, 1:], v[:, :-1], T).sum()
    )
    return float(unary + small + params.lam * pair)


def energy(flow: FlowField, vol: CostVolume, params: FlowParams) -> float:
    return _label_energy(vol.labels_of(flow), vol, params)


def _tie_broken_argmin(costs: np.ndarray, vol: CostVolume) -> np.ndarray:
    """Per-pixel argmin; ties go to the smallest |displacement|, then label order."""
    mins = costs.min(axis=-1, keepdims=True)
    u, v = vol.label_displacements()
    K = costs.shape[-1]
    key = (u.astype(np.float64) ** 2 + v.astype(np.float64) ** 2) * K + np.arange(K)
    return np.argmin(np.where(costs == mins, key, np.inf), axis=-1)


def argmax_flow(vol: CostVolume) -> FlowField:
    """Best displacement per pixel from the unary alone."""
    if np.any(vol.costs.min(axis=-1) >= INF_COST):
        raise AllInfiniteCosts("some pixel has no in-target displacement")
    return vol.flow_of(_tie_broken_argmin(vol.costs, vol))


# --------------------------------------------------------------- inference


def _l1_dt_shifted(h: np.ndarray, axis: int, shift: np.ndarray, lam: float, trunc: float) -> np.ndarray:
    """Truncated-L1 distance transform along ``axis``, read at shifted positions.

    ``out[.., j, .., n] = min_x h[.., x, .., n] + lam * min(|x - (j + shift[n])|, trunc)``
    where the last axis of ``h`` indexes senders.
    """
    f = np.moveaxis(h, axis, 0).copy()
    S = f.shape[0]
    for k in range(1, S):
        np.minimum(f[k], f[k - 1] + lam, out=f[k])
    for k in range(S - 2, -1, -1):
        np.minimum(f[k], f[k + 1] + lam, out=f[k])
    cap = f.min(axis=0) + lam * trunc
    out = f
    moved = np.flatnonzero(shift)
    if moved.size:
        # neighbours mostly share a window centre, so only a few columns move
        tail = (1,) * (f.ndim - 2)
        pos = np.arange(S)[:, None] + shift[moved][None, :]
        clipped = np.clip(pos, 0, S - 1)
        # beyond the ends the untruncated transform grows linearly
        excess = lam * np.abs(pos - clipped)
        sub = np.take_along_axis(f[..., moved], clipped.reshape((S,) + tail + (-1,)), axis=0)
        out[..., moved] = sub + excess.reshape((S,) + tail + (-1,))
    np.minimum(out, cap, out=out)
    return np.moveaxis(out, 0, axis)


def _message_lm(h: np.ndarray, su: np.ndarray, sv: np.ndarray, S: int, lam: float, trunc: float) -> np.ndarray:
    """Min-sum messages in label-major layout: ``h`` is (K, n), one column per
    sender, and receivers' window centres are offset by (su, sv)."""
    n = h.shape[1]
    g = _l1_dt_shifted(h.reshape(S, S, n), 1, su, lam, trunc)  # (dv, du, sender)
    g = _l1_dt_shifted(g, 0, sv, lam, trunc).reshape(S * S, n)
    g -= g.min(axis=0)
    return g


def _message(h: np.ndarray, su: np.ndarray, sv: np.ndarray, S: int, lam: float, trunc: float) -> np.ndarray:
    """Sender-major wrapper of :func:`_message_lm`: ``h`` is (n, K)."""
    return _message_lm(np.ascontiguousarray(h.T), np.asarray(su), np.asarray(sv), S, lam, trunc).T


@njit(cache=True)
def _dt_line(line, shift, lam, trunc, f, out):
    """Scalar twin of :func:`_l1_dt_shifted` for one line of ``S`` labels."""
    S = line.shape[0]
    for k in range(S):
        f[k] = line[k]
    for k in range(1, S):
        f[k] = min(f[k], f[k - 1] + lam)
    for k in range(S - 2, -1, -1):
        f[k] = min(f[k], f[k + 1] + lam)
    cap = f[0]
    for k in range(1, S):
        cap = min(cap, f[k])
    cap = cap + lam * trunc
    for j in range(S):
        if shift == 0:
            val = f[j]
        else:
            p = j + shift
            c = min(max(p, 0), S - 1)
            val = f[c] + lam * abs(p - c)
        out[j] = min(val, cap)


@njit(cache=True)
def _bp_half_sweep(total, inbox, send, back_rows, in_rows, recv, su, sv, S, lam, trunc):
    """Send messages from one checkerboard colour; returns True if none changed.

    ``total`` (N, K) holds unary plus all incoming messages and is updated
    in place, as is ``inbox`` (4N, K). All senders share a colour, so no
    sender's belief changes while the colour is processed.
    """
    K = S * S
    g = np.empty((S, S))
    line = np.empty(S)
    f = np.empty(S)
    out = np.empty(S)
    converged = True
    for i in range(send.shape[0]):
        s, b = send[i], back_rows[i]
        for a in range(S):
            for c in range(S):
                g[a, c] = total[s, a * S + c] - inbox[b, a * S + c]
        # along du within each dv row
        for a in range(S):
            for c in range(S):
                line[c] = g[a, c]
            _dt_line(line, su[i], lam, trunc, f, out)
            for c in range(S):
                g[a, c] = out[c]
        # then along dv within each du column
        for c in range(S):
            for a in range(S):
                line[a] = g[a, c]
            _dt_line(line, sv[i], lam, trunc, f, out)
            for a in range(S):
                g[a, c] = out[a]
        mn = g[0, 0]
        for a in range(S):
            for c in range(S):
                mn = min(mn, g[a, c])
        r, t = in_rows[i], recv[i]
        for k in range(K):
            val = g[k // S, k % S] - mn
            old = inbox[r, k]
            if val != old:
                converged = False
                inbox[r, k] = val
                total[t, k] += val - old
    return converged


def _chain_argmin(unary, cu, cv, S, lam, trunc):
    """Exact minimiser of independent chains by dynamic programming.

    ``unary`` is (n, L, K); ``cu``/``cv`` are (n, L) window centres. The
    forward pass uses the distance-transform messages; the backward pass
    recovers the argmin labels.
    """
    n, L, K = unary.shape
    R = (S - 1) // 2
    k = np.arange(K)
    du, dv = k % S - R, k // S - R
    cum = np.empty_like(unary)
    cum[:, 0] = unary[:, 0]
    for j in range(1, L):
        msg = _message(cum[:, j - 1], cu[:, j] - cu[:, j - 1], cv[:, j] - cv[:, j - 1], S, lam, trunc)
        cum[:, j] = unary[:, j] + msg
    labels = np.empty((n, L), dtype=np.int64)
    labels[:, -1] = np.argmin(cum[:, -1], axis=-1)
    for j in range(L - 2, -1, -1):
        nu = (cu[:, j + 1] + du[labels[:, j + 1]])[:, None]
        nv = (cv[:, j + 1] + dv[labels[:, j + 1]])[:, None]
        u = cu[:, j, None] + du
        v = cv[:, j, None] + dv
        link = lam * (_pairwise(u, nu, trunc) + _pairwise(v, nv, trunc))
        labels[:, j] = np.argmin(cum[:, j] + link, axis=-1)
    return labels


def _conditional_unary(labels, unary, vol, params, axis):
    """Unary plus pairwise terms to the fixed neighbours across ``axis``."""
    u_all, v_all = vol.label_displacements()
    du, dv = vol.offsets()
    u = vol.center_u + du[labels]
    v = vol.center_v + dv[labels]
    T = params.trunc
    out = unary.copy()
    lo = (slice(None),) * axis + (slice(1, None),)
    hi = (slice(None),) * axis + (slice(None, -1),)
    out[lo] += params.lam * (_pairwise(u_all[lo], u[hi][..., None], T) + _pairwise(v_all[lo], v[hi][..., None], T))
    out[hi] += params.lam * (_pairwise(u_all[hi], u[lo][..., None], T) + _pairwise(v_all[hi], v[lo][..., None], T))
    return out


def _polish(labels, unary, vol, params) -> np.ndarray:
    """Block coordinate descent: re-solve whole rows, then whole columns,
    exactly given their neighbours. A chain only changes when its
    conditional energy strictly drops, so the energy never increases."""
    labels = labels.copy()
    H, W = vol.shape
    S = vol.side
    for _ in range(params.polish_sweeps):
        changed = False
        for axis in (0, 1):
            # chains run along axis 1 for rows (axis=0 conditioning), along axis 0 for columns
            for parity in (0, 1):
                cond = _conditional_unary(labels, unary, vol, params, axis)
                lab, cu, cv = labels, vol.center_u, vol.center_v
                if axis == 1:
                    cond = cond.transpose(1, 0, 2)
                    lab, cu, cv = lab.T, cu.T, cv.T
                idx = np.arange(parity, lab.shape[0], 2)
                if idx.size == 0:
                    continue
                new = _chain_argmin(cond[idx], cu[idx], cv[idx], S, params.lam, params.trunc)
                new_e = _chain_energy(cond[idx], new, cu[idx], cv[idx], S, params)
                old_e = _chain_energy(cond[idx], lab[idx], cu[idx], cv[idx], S, params)
                # ignore rounding-level gains so ties cannot flip-flop
                better = new_e < old_e - 1e-9 * (1.0 + np.abs(old_e))
                if better.any():
                    lab = lab.copy()
                    lab[idx[better]] = new[better]
                    labels = lab.T.copy() if axis == 1 else lab
                    changed = True
        if not changed:
            break
    return labels


def _chain_energy(unary, labels, cu, cv, S, params) -> np.ndarray:
    R = (S - 1) // 2
    u = cu + labels % S - R
    v = cv + labels // S - R
    e = np.take_along_axis(unary, labels[..., None], axis=-1)[..., 0].sum(axis=1)
    T = params.trunc
    e += params.lam * (_pairwise(u[:, 1:], u[:, :-1], T) + _pairwise(v[:, 1:], v[:, :-1], T)).sum(axis=1)
    return e


def _bp_links(H: int, W: int, cu: np.ndarray, cv: np.ndarray):
    """Directed edges of the 4-connected grid grouped by sender colour.

    Each entry holds flat sender and receiver indices, the direction of the
    edge (0 down, 1 up, 2 right, 3 left) and the receiver-minus-sender
    window-centre offsets.
    """
    idx = np.arange(H * W).reshape(H, W)
    parity = np.add.outer(np.arange(H), np.arange(W)) % 2
    cu, cv = cu.ravel(), cv.ravel()
    edges = [
        (idx[:-1], idx[1:], 0), (idx[1:], idx[:-1], 1),
        (idx[:, :-1], idx[:, 1:], 2), (idx[:, 1:], idx[:, :-1], 3),
    ]
    groups = []
    for colour in (0, 1):
        send, recv, kind = [], [], []
        for s_, r_, k in edges:
            sel = parity.ravel()[s_.ravel()] == colour
            send.append(s_.ravel()[sel])
            recv.append(r_.ravel()[sel])
            kind.append(np.full(sel.sum(), k))
        send, recv, kind = np.concatenate(send), np.concatenate(recv), np.concatenate(kind)
        groups.append((send, recv, kind, cu[recv] - cu[send], cv[recv] - cv[send]))
    return groups


def optimize_level(vol: CostVolume, params: FlowParams, init: FlowField | None = None) -> FlowField:
    """Min-sum loopy BP on the 4-connected grid, then block coordinate descent.

    Each sweep updates the messages sent by one checkerboard colour and then
    by the other (a fully synchronous update oscillates on bipartite grids).
    Sweeps stop at ``bp_iters``, on exact message convergence, or after
    ``bp_patience`` sweeps without a better decoded labelling. The lowest-energy
    labelling among ``init``, the unary argmin, the best uniform labelling and
    the per-sweep decodings is then polished by exact row/column re-solves, so
    the result never has higher energy than ``init``.
    """
    if init is None:
        init = vol.init_flow()
    init_labels = vol.labels_of(init)
    u_all, v_all = vol.label_displacements()
    unary = vol.costs + params.small_disp_weight * (np.abs(u_all) + np.abs(v_all))

    if params.lam == 0:
        if params.small_disp_weight == 0:
            return argmax_flow(vol)
        return vol.flow_of(_tie_broken_argmin(unary, vol))

    best = init_labels
    best_e = _label_energy(init_labels, vol, params)
    H, W, K = vol.costs.shape
    # The pairwise cost of a uniform labelling does not depend on the label,
    # so the best one (a global translation of the window) is a summed argmin.
    uniform = np.full((H, W), int(np.argmin(unary.sum(axis=(0, 1)))))
    for cand in (_tie_broken_argmin(unary, vol), uniform):
        e = _label_energy(cand, vol, params)
        if e < best_e:
            best, best_e = cand, e

    S = vol.side
    lam, T = params.lam, params.trunc
    N = H * W
    flat_unary = unary.reshape(N, K)
    # Row k * N + r of inbox is the message r last received along direction
    # k; the reverse of direction k is k ^ 1.
    inbox = np.zeros((4 * N, K))
    total = flat_unary.copy()
    plan = []
    for send, recv, kind, su, sv in (_bp_links(H, W, vol.center_u, vol.center_v) if N > 1 else []):
        plan.append((send, (kind ^ 1) * N + send, kind * N + recv, recv, su, sv))
    stale = 0
    for _ in range(params.bp_iters if plan else 0):
        converged = True
        for send, back_rows, in_rows, recv, su, sv in plan:
            converged &= _bp_half_sweep(total, inbox, send, back_rows, in_rows, recv, su, sv, S, lam, T)
        cand = _tie_broken_argmin(total.reshape(H, W, K), vol)
        e = _label_energy(cand, vol, params)
        stale += 1
        if e < best_e:
            best, best_e = cand, e
            stale = 0
        if converged or stale >= params.bp_patience:
            break

    best = _polish(best, unary, vol, params)
    return vol.flow_of(best)


# ---------------------------------------------------------- coarse-to-fine


def downsample_features(fm: FeatureMap) -> FeatureMap:
    smooth = gaussian_filter(fm.data, sigma=(1.0, 1.0, 0.0), mode="nearest")
    return FeatureMap(smooth[::2, ::2])


def auto_levels(shape: tuple[int, int], coarsest_dim: int = 16) -> int:
    """Pyramid depth whose coarsest level has max dimension closest to ``coarsest_dim``."""
    m = max(shape)
    if m <= coarsest_dim:
        return 1
    return max(1, int(round(math.log2(m / coarsest_dim))) + 1)


def _pyramid(fm: FeatureMap, levels: int) -> list[FeatureMap]:
    pyr = [fm]
    for _ in range(levels - 1):
        pyr.append(downsample_features(pyr[-1]))
    return pyr


def _upsample_centers(flow: FlowField, shape, target_shape) -> tuple[np.ndarray, np.ndarray]:
    H, W = shape
    P, Q = target_shape
    rows, cols = np.indices(shape)
    cr = np.minimum(rows // 2, flow.shape[0] - 1)
    cc = np.minimum(cols // 2, flow.shape[1] - 1)
    cu = 2 * flow.u[cr, cc].astype(np.int64)
    cv = 2 * flow.v[cr, cc].astype(np.int64)
    cu = np.clip(cols + cu, 0, Q - 1) - cols
    cv = np.clip(rows + cv, 0, P - 1) - rows
    return cu, cv


def optimize_flow(
    fm_ref: FeatureMap,
    fm_tgt: FeatureMap,
    unary,
    params: FlowParams | None = None,
    history: list | None = None,
) -> FlowField:
    """Coarse-to-fine flow between two feature maps.

    ``unary`` is an :class:`L1Unary` or :class:`LdaUnary`. The coarsest level
    searches every displacement (unless ``params.coarse_radius`` caps it);
    finer levels refine within ``params.window_radius`` of the doubled coarse
    flow. If ``history`` is given, one dict per level is appended with the
    initial and final energies.
    """
    params = params or FlowParams()
    if fm_ref.channels != fm_tgt.channels:
        raise DimensionMismatch(f"{fm_ref.channels} vs {fm_tgt.channels} channels")
    dh, dw = unary.detector
    levels = params.levels
    if levels is None:
        levels = auto_levels(fm_ref.shape, params.coarsest_dim)
        # back off until every level still holds a detector
        while levels > 1 and min(
            math.ceil(min(fm_ref.shape) / 2 ** (levels - 1)), math.ceil(min(fm_tgt.shape) / 2 ** (levels - 1))
        ) < max(dh, dw):
            levels -= 1
    pyr_ref = _pyramid(fm_ref, levels)
    pyr_tgt = _pyramid(fm_tgt, levels)
    for lvl, (a, b) in enumerate(zip(pyr_ref, pyr_tgt)):
        if min(a.height, b.height) < dh or min(a.width, b.width) < dw:
            raise PyramidTooDeep(f"level {lvl} ({a.shape} / {b.shape}) is smaller than the {dh}x{dw} detector")

    flow = None
    for lvl in range(levels - 1, -1, -1):
        ref, tgt = pyr_ref[lvl], pyr_tgt[lvl]
        if flow is None:
            centers = None
            radius = max(ref.height, ref.width, tgt.height, tgt.width) - 1
            if params.coarse_radius is not None:
                radius = min(radius, params.coarse_radius)
        else:
            centers = _upsample_centers(flow, ref.shape, tgt.shape)
            radius = params.window_radius
        vol = build_cost_volume(unary.source(ref, tgt), radius, centers)
        init = vol.init_flow()
        flow = optimize_level(vol, params, init)
        if history is not None:
            history.append({
                "level": lvl,
                "shape": ref.shape,
                "radius": radius,
                "energy_init": _label_energy(vol.labels_of(init), vol, params),
                "energy_out": energy(flow, vol, params),
            })
    return flow


def warp_image(img_tgt: ImageGray, flow: FlowField) -> ImageGray:
    """Sample the target at each reference pixel's match; unmatched pixels are 0."""
    if tuple(img_tgt.data.shape) != tuple(flow.target_shape):
        raise DimensionMismatch(f"target image {img_tgt.data.shape} vs flow target {flow.target_shape}")
    rows, cols = np.indices(flow.shape)
    ok = flow.valid & flow.inside_target()
    P, Q = flow.target_shape
    tr = np.clip(rows + flow.v, 0, P - 1)
    tc = np.clip(cols + flow.u, 0, Q - 1)
    return ImageGray(np.where(ok, img_tgt.data[tr, tc], 0.0))


# ------------------------------------------------------------------ flow IO

# Flow file: magic, version, H, W, target H, target W, int16 (u, v) pairs,
# CRC32 trailer. Invalid pixels are written as (-32768, -32768).
_SFLO_MAGIC = b"SFLO"
_SFLO_VERSION = 1
_SFLO_HEADER = struct.Struct("<4sIIIII")
_INVALID = -32768


def save_flow(path, flow: FlowField) -> None:
    if np.abs(flow.u).max(initial=0) > 32767 or np.abs(flow.v).max(initial=0) > 32767:
        raise ValueError("displacements exceed the int16 range")
    H, W = flow.shape
    P, Q = flow.target_shape
    pairs = np.stack([flow.u, flow.v], axis=-1).astype("<i2")
    pairs[~flow.valid] = _INVALID
    body = _SFLO_HEADER.pack(_SFLO_MAGIC, _SFLO_VERSION, H, W, P, Q) + pairs.tobytes()
    try:
        Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_flow(path) -> FlowField:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != _SFLO_MAGIC:
        raise BadMagic(f"{path}: not a flow file")
    if len(blob) < _SFLO_HEADER.size + 4:
        raise CorruptPayload(f"{path}: truncated")
    _, version, H, W, P, Q = _SFLO_HEADER.unpack_from(blob)
    if version != _SFLO_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {_SFLO_VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if len(blob) != _SFLO_HEADER.size + 4 * H * W + 4 or zlib.crc32(body) != crc:
        raise CorruptPayload(f"{path}: length or checksum mismatch")
    pairs = np.frombuffer(blob, "<i2", 2 * H * W, _SFLO_HEADER.size).reshape(H, W, 2)
    valid = ~((pairs[..., 0] == _INVALID) & (pairs[..., 1] == _INVALID))
    u = np.where(valid, pairs[..., 0], 0).astype(np.int32)
    v = np.where(valid, pairs[..., 1], 0).astype(np.int32)
    return FlowField(u, v, valid, (P, Q))


def save_flow_csv(path, flow: FlowField) -> None:
    rows, cols = np.nonzero(flow.valid)
    lines = ["r,c,u,v"]
    lines += [f"{r},{c},{flow.u[r, c]},{flow.v[r, c]}" for r, c in zip(rows, cols)]
    Path(path).write_text("\n".join(lines) + "\n")
