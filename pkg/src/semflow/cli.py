"""Command-line entry point: ``semflow stats|match|eval|plot|synth``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit, synth
from .errors import (
    AllInfiniteCosts,
    ConfigError,
    DecodeFailed,
    EmptyDistances,
    FileFormatError,
    InsufficientData,
    IoError,
    MissingPrediction,
    NonFinite,
    NotFound,
    NotPositiveDefinite,
    OutOfBounds,
    ParseError,
    PyramidTooDeep,
    SemflowError,
    TooFewAnnotators,
    UnsupportedFormat,
)
from .exemplar import best_matches, l1_best_matches, learn_bank, posterior_map, save_map_pgm
from .flowopt import (
    FlowField,
    FlowParams,
    L1Unary,
    LdaUnary,
    load_flow,
    optimize_flow,
    save_flow,
    save_flow_csv,
    warp_image,
)
from .imagefeat import FeatureMap, SiftParams, dense_sift, load_image, resize_max_dim, save_image
from .statstore import (
    CHOLESKY,
    EXPLICIT_INVERSE,
    detector_factor,
    empty_stats,
    finalize,
    load_stats,
    merge_stats,
    save_stats,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("semflow")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".pgm", ".ppm"}


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    unary: str = "lda"
    detector_h: int = 5
    detector_w: int = 5
    bandwidth: int = 8
    # Prior log-ratio and shrinkage were chosen together by cross-validation on
    # a held-out synthetic benchmark. Without shrinkage the covariance is
    # near-singular and the classifiers fit noise. Without a negative prior the
    # posterior saturates and neighbouring displacements cost the same.
    prior: float = -30.0
    max_dim: int = 150
    seed: int = 0
    out: str = "out"
    factor: str = CHOLESKY
    rel_floor: float = 1.0
    sift: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)

    def sift_params(self) -> SiftParams:
        return _build(SiftParams, self.sift, "sift")

    def flow_params(self) -> FlowParams:
        return _build(FlowParams, self.flow, "flow")

    def validate(self) -> RunConfig:
        checks = [
            ("unary", self.unary in ("lda", "l1"), "must be 'lda' or 'l1'"),
            ("detector_h", _is_int(self.detector_h) and self.detector_h >= 1, "must be an integer >= 1"),
            ("detector_w", _is_int(self.detector_w) and self.detector_w >= 1, "must be an integer >= 1"),
            ("bandwidth", _is_int(self.bandwidth) and self.bandwidth >= 1, "must be an integer >= 1"),
            ("prior", _is_num(self.prior) and np.isfinite(self.prior), "must be a finite number"),
            ("max_dim", _is_int(self.max_dim) and self.max_dim >= 8, "must be an integer >= 8"),
            ("seed", _is_int(self.seed) and self.seed >= 0, "must be an integer >= 0"),
            ("factor", self.factor in (CHOLESKY, EXPLICIT_INVERSE), f"must be {CHOLESKY!r} or {EXPLICIT_INVERSE!r}"),
            ("rel_floor", _is_num(self.rel_floor) and self.rel_floor > 0, "must be > 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")
        self.sift_params()
        self.flow_params()
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def experiment_dict(self) -> dict:
        """Everything that can change results (the output location cannot)."""
        doc = self.as_dict()
        doc.pop("out")
        return doc

    def digest(self) -> str:
        blob = json.dumps(self.experiment_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _build(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    for k in values:
        if k not in known:
            raise ConfigError(f"{section}.{k}: unknown field")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        # constructors name the offending field in their message
        raise ConfigError(f"{section}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: no such file {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {path}: {exc}") from exc
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for k, v in doc.items():
        if k not in known:
            raise ConfigError(f"{k}: unknown field")
        if k in ("sift", "flow") and not isinstance(v, dict):
            raise ConfigError(f"{k}: must be a table")
        setattr(cfg, k, dict(v) if isinstance(v, dict) else v)
    return cfg


def parse_detector(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"detector: expected HxW such as 5x5, got {text!r}") from exc
    if h < 1 or w < 1:
        raise ConfigError(f"detector: sizes must be >= 1, got {text!r}")
    return h, w


def resolve_config(args) -> RunConfig:
    """Config file values, overridden by any flags given on the command line."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for name in ("unary", "bandwidth", "prior", "max_dim", "seed", "out", "rel_floor", "factor"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "detector", None):
        cfg.detector_h, cfg.detector_w = parse_detector(args.detector)
    for name in ("lam", "trunc", "small_disp_weight", "levels", "window_radius", "bp_iters"):
        val = getattr(args, name, None)
        if val is not None:
            cfg.flow[name] = val
    return cfg.validate()


# ------------------------------------------------------------------ helpers


def _features(path, cfg: RunConfig) -> tuple[FeatureMap, object]:
    img = resize_max_dim(load_image(path), cfg.max_dim)
    return dense_sift(img, cfg.sift_params()), img


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what}: required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what}: no such file {p}")
    return p


def _unary(cfg: RunConfig, stats_path):
    if cfg.unary == "l1":
        return L1Unary()
    acc = load_stats(_require_file(stats_path, "stats"))
    mean, tensor = finalize(acc)
    return LdaUnary(
        detector_factor(mean, tensor, cfg.detector_h, cfg.detector_w, cfg.factor, cfg.rel_floor),
        cfg.prior,
    )


def _stats_chunk(paths: list[str], cfg_dict: dict, bandwidth: int):
    cfg = config_from_dict(cfg_dict)
    acc = None
    for p in paths:
        fm, _ = _features(p, cfg)
        if acc is None:
            acc = empty_stats(fm.channels, bandwidth)
        acc.add(fm)
    return acc


def argmax_flow_unregularized(fm_ref: FeatureMap, fm_tgt: FeatureMap, unary) -> FlowField:
    """Best target pixel per reference pixel over the whole target, no smoothing."""
    if isinstance(unary, LdaUnary):
        bank = learn_bank(unary.factor, fm_ref, unary.prior)
        index, _ = best_matches(bank, fm_tgt)
    else:
        index, _ = l1_best_matches(fm_ref, fm_tgt)
    rows, cols = np.indices(fm_ref.shape)
    tr, tc = np.divmod(index.reshape(fm_ref.shape), fm_tgt.width)
    return FlowField(
        (tc - cols).astype(np.int32), (tr - rows).astype(np.int32),
        np.ones(fm_ref.shape, bool), fm_tgt.shape,
    )


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_stats(args) -> int:
    cfg = resolve_config(args)
    if not args.corpus or not Path(args.corpus).is_dir():
        raise ConfigError(f"corpus: not a directory: {args.corpus}")
    files = sorted(str(p) for p in Path(args.corpus).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"corpus: no images in {args.corpus}")
    if args.limit is not None and args.limit < len(files):
        rng = np.random.default_rng(cfg.seed)
        files = sorted(rng.choice(files, size=args.limit, replace=False).tolist())
    out = Path(args.out_file or Path(cfg.out) / "corpus.scov")
    out.parent.mkdir(parents=True, exist_ok=True)

    jobs = max(1, min(args.jobs, len(files)))
    chunks = [files[i::jobs] for i in range(jobs)]
    if jobs == 1:
        parts = [_stats_chunk(files, cfg.as_dict(), cfg.bandwidth)]
    else:
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_stats_chunk, chunks, [cfg.as_dict()] * jobs, [cfg.bandwidth] * jobs))
    # integer accumulators: the merge is exact, so chunking cannot change the result
    acc = parts[0]
    for part in parts[1:]:
        acc = merge_stats(acc, part)
    save_stats(acc, out)
    print(f"images={acc.n_images} channels={acc.channels} bandwidth={acc.bandwidth} -> {out}")
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = resolve_config(args)
    ref_path = _require_file(args.ref, "ref")
    tgt_path = _require_file(args.tgt, "tgt")
    if cfg.unary == "lda":
        _require_file(args.stats, "stats")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    t0 = time.perf_counter()
    fm_ref, _ = _features(ref_path, cfg)
    fm_tgt, img_tgt = _features(tgt_path, cfg)
    timings["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    unary = _unary(cfg, args.stats)
    timings["factorize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    history = []
    flow = optimize_flow(fm_ref, fm_tgt, unary, cfg.flow_params(), history)
    timings["optimize"] = time.perf_counter() - t0

    save_flow(out / "flow.sflo", flow)
    save_flow_csv(out / "flow.csv", flow)
    save_image(out / "warped.png", warp_image(img_tgt, flow))

    maps = []
    if args.points:
        if not isinstance(unary, LdaUnary):
            log.warning("posterior maps need the lda unary; skipping %d points", len(args.points))
        else:
            bank = learn_bank(unary.factor, fm_ref, unary.prior)
            for text in args.points:
                r, c = _parse_point(text, fm_ref.shape)
                lmap = posterior_map(bank.entry(r, c), fm_tgt, unary.prior, None, unary.detector)
                name = f"posterior_r{r}_c{c}.pgm"
                save_map_pgm(out / name, lmap)
                maps.append(name)

    interior = _interior(flow, unary.detector)
    mag = np.hypot(flow.u, flow.v)[interior & flow.valid]
    mean_mag = float(mag.mean()) if mag.size else float("nan")
    manifest = {
        "config": cfg.experiment_dict(),
        "config_sha256": cfg.digest(),
        "inputs": {"ref": str(ref_path), "tgt": str(tgt_path), "stats": args.stats},
        "ref_shape": list(fm_ref.shape),
        "tgt_shape": list(fm_tgt.shape),
        "levels": [{**h, "shape": list(h["shape"])} for h in history],
        "mean_abs_flow_interior": mean_mag,
        "outputs": ["flow.sflo", "flow.csv", "warped.png"] + maps,
        "timings_s": timings,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"mean |flow| over valid interior: {mean_mag:.3f} px -> {out}")
    return EXIT_OK


def _parse_point(text: str, shape) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"points: expected r,c, got {text!r}") from exc
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise ConfigError(f"points: ({r}, {c}) outside the {shape[0]}x{shape[1]} feature grid")
    return r, c


def _interior(flow: FlowField, detector) -> np.ndarray:
    H, W = flow.shape
    mr, mc = detector[0] // 2, detector[1] // 2
    mask = np.zeros((H, W), bool)
    mask[mr:H - mr, mc:W - mc] = True
    return mask


def _method_name(text: str) -> tuple[str, str]:
    if "=" in text:
        name, src = text.split("=", 1)
        return name, src
    if text.startswith("baseline:"):
        return text.split(":", 1)[1], text
    return Path(text).stem, text


def _predictions_for(src: str, ann: evalkit.AnnotationSet, cfg: RunConfig, stats):
    """Yield (pair, predictions dict) for one prediction source."""
    if src == "baseline:identity":
        for pair in ann.pairs:
            pts = evalkit.identity_baseline([k.source_xy for k in pair.keypoints], pair.source_size, pair.target_size)
            yield pair, {k.id: tuple(p) for k, p in zip(pair.keypoints, pts)}
        return
    if src == "baseline:argmax":
        unary = _unary(cfg, stats)
        for pair in ann.pairs:
            fm_ref, _ = _features(ann.image_path(pair.source), cfg)
            fm_tgt, _ = _features(ann.image_path(pair.target), cfg)
            flow = argmax_flow_unregularized(fm_ref, fm_tgt, unary)
            yield pair, evalkit.flow_predictions(flow, pair)
        return
    if src.startswith("baseline:"):
        raise ConfigError(f"flow: unknown baseline {src!r}")
    path = Path(src)
    if path.suffix == ".json":
        table = evalkit.load_predictions(path)
        for pair in ann.pairs:
            yield pair, table.get(pair.key, {})
        return
    if path.suffix == ".sflo":
        if len(ann.pairs) != 1:
            raise ConfigError(f"flow: a single flow file needs a one-pair annotation set, got {len(ann.pairs)}")
        yield ann.pairs[0], evalkit.flow_predictions(load_flow(path), ann.pairs[0])
        return
    if path.is_dir():
        for pair in ann.pairs:
            stem = f"{Path(pair.source).stem}__{Path(pair.target).stem}"
            cands = [path / stem / "flow.sflo", path / f"{stem}.sflo"]
            found = next((c for c in cands if c.is_file()), None)
            if found is None:
                yield pair, {}
            else:
                yield pair, evalkit.flow_predictions(load_flow(found), pair)
        return
    raise ConfigError(f"flow: no such prediction source {src!r}")


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ann = evalkit.load_annotations(_require_file(args.annotations, "annotations"))
    if not args.flow:
        raise ConfigError("flow: give at least one prediction source")
    curves = {}
    thresholds = None
    for text in args.flow:
        name, src = _method_name(text)
        if name in curves:
            raise ConfigError(f"flow: duplicate method name {name!r}")
        distances, missing = [], 0
        for pair, preds in _predictions_for(src, ann, cfg, args.stats):
            scores, miss = evalkit.score_pair(pair, preds, on_missing="skip")
            distances += [s.distance for s in scores]
            missing += miss
        if missing:
            log.warning("%s: %d keypoints without a prediction were excluded", name, missing)
        if not distances:
            raise EmptyDistances(f"{name}: no keypoint could be scored")
        thresholds, curves[name] = evalkit.cdf(distances, args.max_sd, args.bins)
    out = Path(args.out_file or Path(cfg.out) / "cdf.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    evalkit.write_cdf_csv(out, thresholds, curves)
    if args.svg:
        evalkit.plot_cdf_svg(args.svg, thresholds, curves)
    at_max = ", ".join(f"{n}={c[-1]:.3f}" for n, c in curves.items())
    print(f"fraction within {args.max_sd:g} sd: {at_max} -> {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    thresholds, curves = evalkit.read_cdf_csv(_require_file(args.cdf, "cdf"))
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    evalkit.plot_cdf_svg(out, thresholds, curves)
    print(f"plot -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    ann = synth.write_benchmark(out / "pairs", args.pairs, seed=args.seed)
    synth.write_corpus(out / "corpus", args.negatives, seed=args.seed + 1)
    print(f"{args.pairs} pairs -> {ann}; {args.negatives} corpus images -> {out / 'corpus'}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semflow", description="Dense semantic correspondence with exemplar LDA unaries.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML run configuration; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--max-dim", dest="max_dim", type=int)
        p.add_argument("--unary", choices=["lda", "l1"])
        p.add_argument("--detector", help="classifier size, e.g. 5x5")
        p.add_argument("--stats", help="corpus statistics file (.scov)")
        p.add_argument("--prior", type=float, help="prior log-ratio added to every classifier score")
        p.add_argument("--rel-floor", dest="rel_floor", type=float,
                       help="covariance shrinkage, as a multiple of the mean variance")
        p.add_argument("--factor", choices=[CHOLESKY, EXPLICIT_INVERSE])

    p = sub.add_parser("stats", help="accumulate corpus statistics")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--bandwidth", type=int)
    p.add_argument("--limit", type=int, help="use a seeded random subset of this many images")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", dest="out_file", help="output .scov path")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("match", help="dense flow between two images")
    common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--points", nargs="*", help="reference pixels r,c for posterior maps")
    p.add_argument("--lam", type=float)
    p.add_argument("--trunc", type=float)
    p.add_argument("--small-disp-weight", dest="small_disp_weight", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--window-radius", dest="window_radius", type=int)
    p.add_argument("--bp-iters", dest="bp_iters", type=int)
    p.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; matching runs in one process")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="score predictions against annotations")
    common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--flow", action="append", default=[],
                   help="[name=]source: baseline:identity, baseline:argmax, predictions .json, "
                        ".sflo file, or a directory of match outputs")
    p.add_argument("--max-sd", dest="max_sd", type=float, default=3.0)
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--out", dest="out_file", help="output CSV path")
    p.add_argument("--svg", help="also write an SVG plot here")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render a CDF CSV as SVG")
    p.add_argument("--cdf", required=True)
    p.add_argument("--out", dest="out_file", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", help="write a synthetic benchmark and corpus")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--negatives", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


_CONFIG_ERRORS = (ConfigError, ParseError, OutOfBounds, TooFewAnnotators, EmptyDistances, MissingPrediction)
_IO_ERRORS = (IoError, NotFound, DecodeFailed, UnsupportedFormat, FileFormatError, OSError)
_NUMERIC_ERRORS = (NotPositiveDefinite, NonFinite, InsufficientData, AllInfiniteCosts, PyramidTooDeep)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _IO_ERRORS as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SemflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
