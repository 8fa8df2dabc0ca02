from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from semflow import cli
from semflow.errors import NotPositiveDefinite
from semflow.evalkit import fit_gt, load_annotations, read_cdf_csv
from semflow.flowopt import load_flow
from semflow.imagefeat import ImageGray, save_image
from semflow.statstore import load_stats
from semflow.synth import texture


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root), "--pairs", "2", "--negatives", "5", "--seed", "3"]) == 0
    stats = root / "corpus.scov"
    assert cli.main(["stats", "--corpus", str(root / "corpus"), "--bandwidth", "4", "--out", str(stats)]) == 0
    return root


def _run_match(work, out, unary="l1", ref="pair00_a.png", tgt="pair00_b.png", extra=()):
    args = [
        "match", "--ref", str(work / "pairs" / ref), "--tgt", str(work / "pairs" / tgt),
        "--unary", unary, "--out", str(out), *extra,
    ]
    if unary == "lda":
        args += ["--stats", str(work / "corpus.scov")]
    return cli.main(args)


def test_stats_file_loads(work, capsys):
    acc = load_stats(work / "corpus.scov")
    assert acc.n_images == 5 and acc.channels == 128 and acc.bandwidth == 4


def test_stats_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["stats", "--corpus", str(tmp_path / "empty"), "--out", str(tmp_path / "s.scov")]) == 2
    assert "no images" in capsys.readouterr().err


def test_stats_jobs_bit_exact(work, tmp_path):
    one, two = tmp_path / "one.scov", tmp_path / "two.scov"
    base = ["stats", "--corpus", str(work / "corpus"), "--bandwidth", "2"]
    assert cli.main(base + ["--out", str(one), "--jobs", "1"]) == 0
    assert cli.main(base + ["--out", str(two), "--jobs", "2"]) == 0
    assert one.read_bytes() == two.read_bytes()


def test_stats_prints_summary(work, tmp_path, capsys):
    cli.main(["stats", "--corpus", str(work / "corpus"), "--bandwidth", "1", "--limit", "3",
              "--out", str(tmp_path / "s.scov")])
    out = capsys.readouterr().out
    assert "images=3" in out and "channels=128" in out and "bandwidth=1" in out


@pytest.mark.parametrize("unary", ["l1", "lda"])
def test_match_outputs(work, tmp_path, unary):
    out = tmp_path / unary
    extra = ["--points", "10,12", "20,30"] if unary == "lda" else []
    assert _run_match(work, out, unary, extra=extra) == 0
    for name in ("flow.sflo", "flow.csv", "warped.png", "manifest.json"):
        assert (out / name).is_file()
    flow = load_flow(out / "flow.sflo")
    assert flow.shape == (64, 80)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["unary"] == unary
    assert len(manifest["config_sha256"]) == 64
    assert all(lv["energy_out"] <= lv["energy_init"] for lv in manifest["levels"])
    if unary == "lda":
        assert (out / "posterior_r10_c12.pgm").is_file() and (out / "posterior_r20_c30.pgm").is_file()


def test_match_self_is_still(work, tmp_path):
    assert _run_match(work, tmp_path / "self", "lda", tgt="pair00_a.png") == 0
    manifest = json.loads((tmp_path / "self" / "manifest.json").read_text())
    assert manifest["mean_abs_flow_interior"] < 0.5


def test_match_missing_stats(work, tmp_path, capsys):
    args = ["match", "--ref", str(work / "pairs" / "pair00_a.png"), "--tgt", str(work / "pairs" / "pair00_b.png"),
            "--unary", "lda", "--out", str(tmp_path / "o")]
    assert cli.main(args + ["--stats", str(tmp_path / "nope.scov")]) == 2
    assert "stats" in capsys.readouterr().err
    assert cli.main(args[:-4] + ["--unary", "l1", "--out", str(tmp_path / "o")]) == 0


def test_match_reproducible(work, tmp_path):
    assert _run_match(work, tmp_path / "a", "l1") == 0
    assert _run_match(work, tmp_path / "b", "l1") == 0
    for name in ("flow.sflo", "flow.csv", "warped.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    for m in (ma, mb):
        m.pop("timings_s")
        m.pop("inputs")
    assert ma == mb


def test_match_corrupt_stats_is_io_error(work, tmp_path):
    bad = tmp_path / "bad.scov"
    bad.write_bytes(b"garbage!" * 8)
    args = ["match", "--ref", str(work / "pairs" / "pair00_a.png"), "--tgt", str(work / "pairs" / "pair00_b.png"),
            "--unary", "lda", "--stats", str(bad), "--out", str(tmp_path / "o")]
    assert cli.main(args) == 3


def test_numeric_failure_exit_code(monkeypatch, tmp_path):
    def boom(args):
        raise NotPositiveDefinite("factorization failed")

    monkeypatch.setattr(cli, "cmd_plot", boom)
    parser = cli.build_parser
    monkeypatch.setattr(cli, "build_parser", lambda: _with_func(parser(), boom))
    assert cli.main(["plot", "--cdf", "x.csv", "--out", str(tmp_path / "x.svg")]) == 4


def _with_func(parser, func):
    parser.set_defaults(func=func)
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            sub.set_defaults(func=func)
    return parser


def _zero_flow_dataset(root):
    rng = np.random.default_rng(1)
    img = ImageGray(texture(rng, (40, 48)))
    save_image(root / "a.png", img)
    save_image(root / "b.png", img)
    kps = []
    for i, xy in enumerate([(10.5, 10.5), (30.2, 20.7), (5.5, 33.3)]):
        kps.append({"id": str(i), "source_xy": list(xy), "annotations": [list(xy), list(xy), list(xy)]})
    doc = {"pairs": [{"source": "a.png", "target": "b.png", "source_size": [48, 40],
                      "target_size": [48, 40], "keypoints": kps}]}
    (root / "ann.json").write_text(json.dumps(doc))
    return root / "ann.json"


def test_eval_identity_zero_flow(tmp_path):
    ann = _zero_flow_dataset(tmp_path)
    out = tmp_path / "cdf.csv"
    assert cli.main(["eval", "--annotations", str(ann), "--flow", "baseline:identity", "--out", str(out)]) == 0
    t, curves = read_cdf_csv(out)
    assert len(t) == 30 and np.all(curves["identity"] == 1.0)


def test_eval_oracle_and_two_columns(work, tmp_path):
    ann_path = work / "pairs" / "annotations.json"
    ann = load_annotations(ann_path)
    doc = {"pairs": [
        {"source": p.source, "target": p.target,
         "predictions": {k.id: fit_gt(k.labelled()).mu.tolist() for k in p.keypoints}}
        for p in ann.pairs
    ]}
    preds = tmp_path / "oracle.json"
    preds.write_text(json.dumps(doc))
    out = tmp_path / "cdf.csv"
    svg = tmp_path / "cdf.svg"
    assert cli.main(["eval", "--annotations", str(ann_path), "--flow", f"oracle={preds}",
                     "--flow", "baseline:identity", "--out", str(out), "--svg", str(svg), "--bins", "6"]) == 0
    t, curves = read_cdf_csv(out)
    assert list(curves) == ["oracle", "identity"]
    np.testing.assert_allclose(t, [0.5, 1, 1.5, 2, 2.5, 3])
    assert np.all(curves["oracle"] == 1.0)
    assert svg.read_bytes().startswith(b"<?xml")


def test_eval_flow_directory_and_missing(work, tmp_path, caplog):
    runs = tmp_path / "runs"
    assert _run_match(work, runs / "pair00_a__pair00_b", "l1") == 0
    out = tmp_path / "cdf.csv"
    code = cli.main(["eval", "--annotations", str(work / "pairs" / "annotations.json"),
                     "--flow", f"l1={runs}", "--flow", "baseline:argmax", "--unary", "l1", "--max-dim", "40",
                     "--out", str(out)])
    assert code == 0
    _, curves = read_cdf_csv(out)
    assert set(curves) == {"l1", "argmax"}
    assert any("excluded" in r.message for r in caplog.records)


def test_eval_bad_source(work, tmp_path):
    assert cli.main(["eval", "--annotations", str(work / "pairs" / "annotations.json"),
                     "--flow", "baseline:nope", "--out", str(tmp_path / "c.csv")]) == 2


def test_plot_command(tmp_path):
    csv = tmp_path / "c.csv"
    csv.write_text("threshold_sd,a\n1,0.5\n2,0.75\n3,1\n")
    assert cli.main(["plot", "--cdf", str(csv), "--out", str(tmp_path / "p.svg")]) == 0
    assert (tmp_path / "p.svg").stat().st_size > 0


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('unary = "l1"\nprior = 2.5\n[flow]\nlam = 0.5\n')
    args = cli.build_parser().parse_args(["eval", "--annotations", "a.json", "--config", str(cfg), "--prior", "1.0"])
    resolved = cli.resolve_config(args)
    assert resolved.unary == "l1" and resolved.prior == 1.0
    assert resolved.flow_params().lam == 0.5


@pytest.mark.parametrize("text, field", [
    ("detector_h = 0", "detector_h"),
    ('unary = "svm"', "unary"),
    ("rel_floor = -1.0", "rel_floor"),
    ("[flow]\nlam = -2.0", "lam"),
    ("[flow]\nbogus = 1", "flow.bogus"),
    ("[sift]\nclamp = 3.0", "clamp"),
    ("mystery = 1", "mystery"),
])
def test_config_validation_names_field(tmp_path, capsys, text, field):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text + "\n")
    code = cli.main(["eval", "--annotations", str(tmp_path / "a.json"), "--config", str(cfg),
                     "--flow", "baseline:identity"])
    assert code == 2
    assert field in capsys.readouterr().err


def test_detector_parse():
    assert cli.parse_detector("5x3") == (5, 3)
    with pytest.raises(cli.ConfigError):
        cli.parse_detector("five")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "semflow", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("stats", "match", "eval", "plot"):
        assert cmd in res.stdout
