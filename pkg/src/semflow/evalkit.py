"""Keypoint evaluation: annotation files, per-point Gaussians, Mahalanobis
scores and cumulative-distance curves.

Coordinates are continuous pixel positions ``(x, y)``. An image of width
``w`` and height ``h`` spans ``[0, w] x [0, h]``, and pixel ``(r, c)``
covers ``[c, c + 1) x [r, r + 1)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDistances,
    IoError,
    MissingPrediction,
    OutOfBounds,
    ParseError,
    SingularCovariance,
    TooFewAnnotators,
    TooFewPoints,
)
from .flowopt import FlowField

# Floor added to every annotator covariance, in px^2.
COV_FLOOR = 0.25


@dataclass
class Keypoint:
    id: str
    source_xy: tuple[float, float]
    # One entry per annotator; None marks a missing annotation.
    annotations: list[tuple[float, float] | None]

    def labelled(self) -> np.ndarray:
        pts = [p for p in self.annotations if p is not None]
        return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


@dataclass
class Pair:
    source: str
    target: str
    source_size: tuple[int, int]  # (width, height)
    target_size: tuple[int, int]
    keypoints: list[Keypoint] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, str]:
        return (self.source, self.target)


@dataclass
class AnnotationSet:
    pairs: list[Pair]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.pairs)

    def image_path(self, name: str) -> Path:
        return self.root / name


@dataclass(frozen=True)
class GtGaussian:
    mu: np.ndarray
    sigma: np.ndarray
    n_annotators: int


@dataclass(frozen=True)
class Score:
    source: str
    target: str
    keypoint: str
    distance: float


# ------------------------------------------------------------------ parsing


def _xy(value, where: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ParseError(f"{where}: expected [x, y], got {value!r}")
    try:
        x, y = float(value[0]), float(value[1])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: non-numeric coordinate {value!r}") from exc
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ParseError(f"{where}: non-finite coordinate {value!r}")
    return x, y


def _size(value, where: str) -> tuple[int, int]:
    if (
        not isinstance(value, (list, tuple)) or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value)
    ):
        raise ParseError(f"{where}: expected [width, height] of positive integers, got {value!r}")
    return int(value[0]), int(value[1])


def _inside(xy: tuple[float, float], size: tuple[int, int]) -> bool:
    return 0.0 <= xy[0] <= size[0] and 0.0 <= xy[1] <= size[1]


def parse_annotations(doc, root: Path = Path(".")) -> AnnotationSet:
    """Validate a decoded annotation document."""
    if not isinstance(doc, dict) or not isinstance(doc.get("pairs"), list):
        raise ParseError("annotation document must be an object with a 'pairs' list")
    pairs = []
    for pi, p in enumerate(doc["pairs"]):
        where = f"pairs[{pi}]"
        if not isinstance(p, dict):
            raise ParseError(f"{where}: expected an object")
        for k in ("source", "target", "source_size", "target_size", "keypoints"):
            if k not in p:
                raise ParseError(f"{where}: missing '{k}'")
        if not isinstance(p["source"], str) or not isinstance(p["target"], str):
            raise ParseError(f"{where}: source and target must be strings")
        pair = Pair(
            p["source"], p["target"],
            _size(p["source_size"], f"{where}.source_size"),
            _size(p["target_size"], f"{where}.target_size"),
        )
        name = f"pair {pi} ({pair.source} -> {pair.target})"
        if not isinstance(p["keypoints"], list):
            raise ParseError(f"{where}: keypoints must be a list")
        n_annot = None
        seen = set()
        for ki, kp in enumerate(p["keypoints"]):
            kwhere = f"{where}.keypoints[{ki}]"
            if not isinstance(kp, dict) or "source_xy" not in kp or "annotations" not in kp:
                raise ParseError(f"{kwhere}: needs 'source_xy' and 'annotations'")
            kid = str(kp.get("id", ki))
            if kid in seen:
                raise ParseError(f"{kwhere}: duplicate keypoint id {kid!r}")
            seen.add(kid)
            src = _xy(kp["source_xy"], f"{kwhere}.source_xy")
            if not _inside(src, pair.source_size):
                raise OutOfBounds(f"{name}, keypoint {kid}: source point {src} outside {pair.source_size}")
            if not isinstance(kp["annotations"], list):
                raise ParseError(f"{kwhere}: annotations must be a list")
            annots = []
            for ai, a in enumerate(kp["annotations"]):
                if a is None:
                    annots.append(None)
                    continue
                xy = _xy(a, f"{kwhere}.annotations[{ai}]")
                if not _inside(xy, pair.target_size):
                    raise OutOfBounds(
                        f"{name}, keypoint {kid}: annotation {ai} at {xy} outside {pair.target_size}"
                    )
                annots.append(xy)
            if n_annot is None:
                n_annot = len(annots)
            elif len(annots) != n_annot:
                raise ParseError(
                    f"{name}, keypoint {kid}: {len(annots)} annotator slots, expected {n_annot} "
                    "(mark missing annotations with null)"
                )
            k = Keypoint(kid, src, annots)
            if len(k.labelled()) < 2:
                raise TooFewAnnotators(f"{name}, keypoint {kid}: needs at least 2 annotations")
            pair.keypoints.append(k)
        pairs.append(pair)
    return AnnotationSet(pairs, Path(root))


def load_annotations(path) -> AnnotationSet:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_annotations(doc, path.parent)


# ------------------------------------------------------------------ metric


def fit_gt(points) -> GtGaussian:
    """Sample mean and (n - 1) covariance of annotator points, plus COV_FLOOR * I."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise TooFewPoints(f"need at least 2 points, got {n}")
    mu = pts.mean(axis=0)
    d = pts - mu
    sigma = d.T @ d / (n - 1) + COV_FLOOR * np.eye(2)
    return GtGaussian(mu, sigma, n)


def mahalanobis(x, gt: GtGaussian) -> float:
    """Distance of ``x`` from the annotator mean, in standard deviations."""
    d = np.asarray(x, dtype=np.float64) - gt.mu
    s = gt.sigma
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    if not det > 0.0 or not s[0, 0] > 0.0:
        raise SingularCovariance(f"covariance {s.tolist()} is not positive definite")
    # closed-form 2x2 inverse
    q = (s[1, 1] * d[0] ** 2 - (s[0, 1] + s[1, 0]) * d[0] * d[1] + s[0, 0] * d[1] ** 2) / det
    return float(math.sqrt(max(q, 0.0)))


def identity_baseline(keypoints, source_size, target_size) -> np.ndarray:
    """Map source points onto the target by stretching one image span onto the other."""
    pts = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    if min(source_size) < 1 or min(target_size) < 1:
        raise ValueError("image sizes must be >= 1")
    scale = np.asarray(target_size, float) / np.asarray(source_size, float)
    return pts * scale


def flow_predictions(flow: FlowField, pair: Pair) -> dict[str, tuple[float, float] | None]:
    """Follow ``flow`` from every keypoint of ``pair``.

    The flow grid may be a resized copy of the source; the keypoint is scaled
    onto it, the displacement of the pixel containing it is added, and the
    result is scaled back into target coordinates. Keypoints on invalid flow
    pixels predict ``None``.
    """
    H, W = flow.shape
    P, Q = flow.target_shape
    sx, sy = W / pair.source_size[0], H / pair.source_size[1]
    tx, ty = pair.target_size[0] / Q, pair.target_size[1] / P
    out = {}
    for kp in pair.keypoints:
        x, y = kp.source_xy[0] * sx, kp.source_xy[1] * sy
        c = min(max(int(math.floor(x)), 0), W - 1)
        r = min(max(int(math.floor(y)), 0), H - 1)
        if not flow.valid[r, c]:
            out[kp.id] = None
            continue
        out[kp.id] = ((x + flow.u[r, c]) * tx, (y + flow.v[r, c]) * ty)
    return out


def score_pair(pair: Pair, predictions, on_missing: str = "raise") -> tuple[list[Score], int]:
    """Mahalanobis distance for every keypoint of ``pair``.

    ``predictions`` maps keypoint id to ``(x, y)`` or None. With
    ``on_missing="skip"`` absent predictions are dropped and counted instead
    of raising MissingPrediction.
    """
    scores, missing = [], 0
    for kp in pair.keypoints:
        pred = predictions.get(kp.id)
        if pred is None:
            if on_missing == "skip":
                missing += 1
                continue
            raise MissingPrediction(f"pair {pair.source} -> {pair.target}, keypoint {kp.id}: no prediction")
        gt = fit_gt(kp.labelled())
        scores.append(Score(pair.source, pair.target, kp.id, mahalanobis(pred, gt)))
    return scores, missing


def score_flow(flow: FlowField, pair: Pair, on_missing: str = "raise") -> tuple[list[Score], int]:
    return score_pair(pair, flow_predictions(flow, pair), on_missing)


def score_identity(annotations: AnnotationSet) -> list[Score]:
    scores = []
    for pair in annotations.pairs:
        pts = identity_baseline([k.source_xy for k in pair.keypoints], pair.source_size, pair.target_size)
        preds = {k.id: tuple(p) for k, p in zip(pair.keypoints, pts)}
        scores += score_pair(pair, preds)[0]
    return scores


def load_predictions(path) -> dict[tuple[str, str], dict[str, tuple[float, float] | None]]:
    """Read ``{pairs: [{source, target, predictions: {id: [x, y] | null}}]}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("pairs"), list):
        raise ParseError(f"{path}: expected an object with a 'pairs' list")
    out = {}
    for i, p in enumerate(doc["pairs"]):
        if not isinstance(p, dict) or not isinstance(p.get("predictions"), dict):
            raise ParseError(f"{path}: pairs[{i}] needs a 'predictions' object")
        preds = {}
        for kid, xy in p["predictions"].items():
            preds[str(kid)] = None if xy is None else _xy(xy, f"pairs[{i}].predictions[{kid}]")
        out[(p.get("source"), p.get("target"))] = preds
    return out


# ------------------------------------------------------------------ curves


def cdf(distances, max_sd: float = 3.0, bins: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of distances at or below each of ``bins`` evenly spaced
    thresholds ``max_sd * k / bins`` for ``k = 1..bins``."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not max_sd > 0:
        raise ValueError("max_sd must be > 0")
    d = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    if d.size == 0:
        raise EmptyDistances("no distances to summarise")
    if np.isnan(d).any():
        raise ValueError("distances contain NaN")
    thresholds = max_sd * np.arange(1, bins + 1) / bins
    frac = np.searchsorted(d, thresholds, side="right") / d.size
    return thresholds, frac


def write_cdf_csv(path, thresholds: np.ndarray, curves: dict[str, np.ndarray]) -> None:
    names = list(curves)
    lines = [",".join(["threshold_sd"] + names)]
    for i, t in enumerate(thresholds):
        lines.append(",".join([f"{t:.6g}"] + [f"{curves[n][i]:.6f}" for n in names]))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_cdf_csv(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    try:
        rows = Path(path).read_text().strip().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    header = rows[0].split(",")
    if header[0] != "threshold_sd":
        raise ParseError(f"{path}: not a CDF table")
    try:
        table = np.array([[float(v) for v in r.split(",")] for r in rows[1:]]).reshape(-1, len(header))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return table[:, 0], {name: table[:, i + 1] for i, name in enumerate(header[1:])}


def plot_cdf_svg(path, thresholds: np.ndarray, curves: dict[str, np.ndarray]) -> None:
    """Render the curves to SVG; the output is byte-stable for equal input."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "semflow", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, frac in curves.items():
            ax.plot(np.concatenate([[0.0], thresholds]), np.concatenate([[0.0], frac]), label=name)
        ax.set_xlabel("distance from groundtruth (sd)")
        ax.set_ylabel("fraction of keypoints")
        ax.set_xlim(0, thresholds[-1])
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
