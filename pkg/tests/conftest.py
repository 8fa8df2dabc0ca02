from __future__ import annotations

import numpy as np
import pytest

from semflow.imagefeat import FeatureMap


def dyadic_map(rng: np.random.Generator, h: int, w: int, c: int) -> FeatureMap:
    """Random feature map whose values sit exactly on the 2^-16 grid, so the
    fixed-point accumulator sees them without rounding."""
    return FeatureMap(rng.integers(0, 1 << 16, (h, w, c)) / float(1 << 16))


def pair_oracle(maps: list[FeatureMap], bandwidth: int) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force mean and centred moments by enumerating pixel pairs."""
    c = maps[0].channels
    pix = np.concatenate([m.data.reshape(-1, c) for m in maps])
    mean = pix.mean(axis=0)
    side = 2 * bandwidth + 1
    g = np.zeros((side, side, c, c))
    for di in range(-bandwidth, bandwidth + 1):
        for dj in range(-bandwidth, bandwidth + 1):
            acc = np.zeros((c, c))
            n = 0
            for m in maps:
                h, w = m.shape
                for r in range(h):
                    for col in range(w):
                        r2, c2 = r + di, col + dj
                        if 0 <= r2 < h and 0 <= c2 < w:
                            acc += np.outer(m.data[r, col], m.data[r2, c2])
                            n += 1
            g[di + bandwidth, dj + bandwidth] = acc / n - np.outer(mean, mean)
    return mean, g


def covariance_oracle(g: np.ndarray, bandwidth: int, dh: int, dw: int) -> np.ndarray:
    """Assemble the detector covariance entry by entry from pair moments."""
    c = g.shape[-1]
    dim = dh * dw * c
    sigma = np.zeros((dim, dim))
    for u in range(dh):
        for v in range(dw):
            for p in range(c):
                for i in range(dh):
                    for j in range(dw):
                        for q in range(c):
                            a = (u * dw + v) * c + p
                            b = (i * dw + j) * c + q
                            sigma[a, b] = g[i - u + bandwidth, j - v + bandwidth, p, q]
    return sigma


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
