"""Dense reference solvers for small flow problems (no distance transforms)."""

from __future__ import annotations

import itertools

import numpy as np

from semflow.flowopt import CostVolume, FlowParams


def random_volume(rng, H, W, radius, centered=False, scale=4.0) -> CostVolume:
    K = (2 * radius + 1) ** 2
    costs = rng.random((H, W, K)) * scale
    if centered:
        cu = rng.integers(-2, 3, (H, W))
        cv = rng.integers(-2, 3, (H, W))
    else:
        cu = np.zeros((H, W), np.int64)
        cv = np.zeros((H, W), np.int64)
    return CostVolume(costs, radius, cu, cv, (H + 20, W + 20), "l1")


def _disp(vol: CostVolume):
    u, v = vol.label_displacements()
    return u.reshape(-1, vol.n_labels), v.reshape(-1, vol.n_labels)


def _unary(vol: CostVolume, params: FlowParams) -> np.ndarray:
    u, v = _disp(vol)
    return vol.costs.reshape(-1, vol.n_labels) + params.small_disp_weight * (np.abs(u) + np.abs(v))


def pair_matrix(vol: CostVolume, params: FlowParams, i: int, j: int) -> np.ndarray:
    """K x K pairwise cost between flat pixels i and j."""
    u, v = _disp(vol)
    T = params.trunc
    du = np.minimum(np.abs(u[i][:, None] - u[j][None, :]), T)
    dv = np.minimum(np.abs(v[i][:, None] - v[j][None, :]), T)
    return params.lam * (du + dv)


def chain_minimum(vol: CostVolume, params: FlowParams) -> float:
    """Viterbi over a 1 x N or N x 1 volume with dense pairwise matrices."""
    un = _unary(vol, params)
    n = un.shape[0]
    cost = un[0].copy()
    for j in range(1, n):
        cost = un[j] + (cost[:, None] + pair_matrix(vol, params, j - 1, j)).min(axis=0)
    return float(cost.min())


def chain_argmin(vol: CostVolume, params: FlowParams) -> np.ndarray:
    """Optimal labels of a chain by Viterbi with backtracking, in grid shape."""
    un = _unary(vol, params)
    n = un.shape[0]
    cost = un[0].copy()
    back = []
    for j in range(1, n):
        total = cost[:, None] + pair_matrix(vol, params, j - 1, j)
        back.append(total.argmin(axis=0))
        cost = un[j] + total.min(axis=0)
    labels = [int(cost.argmin())]
    for b in reversed(back):
        labels.append(int(b[labels[-1]]))
    return np.array(labels[::-1]).reshape(vol.shape)


def grid_minimum(vol: CostVolume, params: FlowParams) -> float:
    """Exact minimum on an H x W grid by DP over whole-column states."""
    H, W = vol.shape
    K = vol.n_labels
    un = _unary(vol, params).reshape(H, W, K)
    states = np.array(list(itertools.product(range(K), repeat=H)))  # (K^H, H)

    def column_cost(c):
        e = un[np.arange(H), c][None, :].repeat(len(states), 0)
        e = e[np.arange(len(states))[:, None], np.arange(H)[None, :], states].sum(axis=1)
        for r in range(H - 1):
            m = pair_matrix(vol, params, r * W + c, (r + 1) * W + c)
            e += m[states[:, r], states[:, r + 1]]
        return e

    best = column_cost(0)
    for c in range(1, W):
        link = np.zeros((len(states), len(states)))
        for r in range(H):
            m = pair_matrix(vol, params, r * W + c - 1, r * W + c)
            link += m[states[:, r][:, None], states[:, r][None, :]]
        best = column_cost(c) + (best[:, None] + link).min(axis=0)
    return float(best.min())


def brute_message(h: np.ndarray, su: int, sv: int, S: int, lam: float, trunc: float) -> np.ndarray:
    """min over sender labels of h + lam * truncated L1, receiver offset by (su, sv)."""
    R = (S - 1) // 2
    k = np.arange(S * S)
    du, dv = k % S - R, k // S - R
    pair = lam * (
        np.minimum(np.abs(du[:, None] - (du[None, :] + su)), trunc)
        + np.minimum(np.abs(dv[:, None] - (dv[None, :] + sv)), trunc)
    )
    m = (h[:, None] + pair).min(axis=0)
    return m - m.min()
