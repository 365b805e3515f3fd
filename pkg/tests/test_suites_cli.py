"""Benchmark-suite handling and the command-line surface.

CLI commands are exercised in process through main(argv) on a miniature
corpus and model (via the JSON config file), checking the files each
subcommand promises, their determinism across identical invocations, and
clean error exits.  Wall-clock numbers always land in separate .timing.json
sidecars so the primary outputs can be compared byte for byte.
"""

import json
import os

import numpy as np
import pytest

from mmsr.cli import heatmap_and_margin, main
from mmsr.corpus import GenConfig
from mmsr.errors import SuiteFormatError
from mmsr.exprs import evaluate, parse_infix
from mmsr.suites import (builtin_suite, indistribution_suite, load_suite_csv,
                         sample_entry_points, SuiteEntry)

TINY_MODEL = {"d_h": 16, "heads": 2, "isab_blocks": 1, "m_inducing": 4,
              "k_slots": 2, "dec_layers": 2, "dropout_p": 0.1}


# --- suites -------------------------------------------------------------------


def test_builtin_suite_is_sane():
    suite = builtin_suite()
    assert len(suite) == 20
    names = [e.name for e in suite]
    assert len(set(names)) == len(names)
    for entry in suite:
        assert 1 <= entry.d <= 2
        assert entry.expr.max_var_index() <= entry.d
        parse_infix(entry.infix())  # grammar round trip
        points = sample_entry_points(entry, seed=0)
        assert points.n == entry.n_points
        assert np.isfinite(points.y).all()
        assert np.abs(points.y).max() <= 1e6
        y, valid = evaluate(entry.expr, points.X)
        assert valid.all()
        np.testing.assert_allclose(y, points.y, rtol=1e-12)


def test_sample_entry_points_deterministic():
    entry = builtin_suite()[0]
    a = sample_entry_points(entry, seed=7)
    b = sample_entry_points(entry, seed=7)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)
    c = sample_entry_points(entry, seed=8)
    assert not np.array_equal(a.X, c.X)


def test_sample_entry_points_rejects_impossible_box():
    entry = SuiteEntry("bad", parse_infix("log(x1 - 50.0)"), 1, 0.0, 1.0, 32)
    with pytest.raises(SuiteFormatError):
        sample_entry_points(entry, seed=0)


def test_load_suite_csv(tmp_path):
    path = tmp_path / "suite.csv"
    path.write_text("name,infix,d,x_low,x_high,n_points\n"
                    "lin,2.0 * x1 + 1.0,1,-1.0,1.0,32\n"
                    "two,x1 * x2,2,-2.0,2.0,16\n")
    entries = load_suite_csv(str(path))
    assert [e.name for e in entries] == ["lin", "two"]
    assert entries[1].d == 2

    path.write_text("name,infix\nlin,x1\n")
    with pytest.raises(SuiteFormatError):
        load_suite_csv(str(path))

    path.write_text("name,infix,d,x_low,x_high,n_points\nbad,x1 +,1,-1,1,32\n")
    with pytest.raises(SuiteFormatError):
        load_suite_csv(str(path))

    path.write_text("name,infix,d,x_low,x_high,n_points\nbad,x2,1,-1,1,32\n")
    with pytest.raises(SuiteFormatError):
        load_suite_csv(str(path))

    path.write_text("name,infix,d,x_low,x_high,n_points\nbad,x1,1,1.0,-1.0,32\n")
    with pytest.raises(SuiteFormatError):
        load_suite_csv(str(path))

    path.write_text("name,infix,d,x_low,x_high,n_points\n")
    with pytest.raises(SuiteFormatError):
        load_suite_csv(str(path))


def test_indistribution_suite_deterministic():
    cfg = GenConfig(seed=4, d_max=2, max_depth=3, n_points=16)
    a = indistribution_suite(cfg, 5, seed=9)
    b = indistribution_suite(cfg, 5, seed=9)
    assert [e.name for e, _ in a] == [f"gen-{i:03d}" for i in range(5)]
    for (ea, pa), (eb, pb) in zip(a, b):
        assert ea.infix() == eb.infix()
        np.testing.assert_array_equal(pa.X, pb.X)
    c = indistribution_suite(cfg, 5, seed=10)
    assert [e.infix() for e, _ in a] != [e.infix() for e, _ in c]


def test_heatmap_margin_oracles():
    eye = np.eye(4)
    norm, margin = heatmap_and_margin(eye, eye)
    assert margin == 1.0  # diagonal distance 0, everything else 1
    np.testing.assert_array_equal(np.diag(norm), np.zeros(4))
    rolled = np.roll(eye, 1, axis=0)
    _, margin_bad = heatmap_and_margin(eye, rolled)
    assert margin_bad < 0.0
    assert norm.min() >= 0.0 and norm.max() <= 1.0


# --- CLI ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A corpus, a config file with a miniature model, and a trained run."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps({
        "gen": {"d_max": 1, "max_depth": 3, "n_points": 16},
        "model": TINY_MODEL,
        "train": {"epochs": 6, "batch_size": 4, "warmup_steps": 5,
                  "eval_split": 0.2},
        "beam": {"beam_width": 16, "n_candidates": 8, "max_len": 16},
    }))
    corpus_dir = root / "corpus"
    rc = main(["--seed", "3", "--config", str(cfg_path), "--out",
               str(corpus_dir), "gen-corpus", "--count", "40"])
    assert rc == 0
    run_dir = root / "run"
    rc = main(["--seed", "3", "--config", str(cfg_path), "--out", str(run_dir),
               "train", "--corpus", str(corpus_dir / "corpus.bin")])
    assert rc == 0
    return {"root": root, "config": str(cfg_path),
            "corpus": str(corpus_dir / "corpus.bin"),
            "checkpoint": str(run_dir / "model.ckpt"), "run": run_dir}


def test_gen_corpus_outputs_and_determinism(workdir, tmp_path):
    corpus_dir = os.path.dirname(workdir["corpus"])
    for suffix in (".bin", ".stats.json", ".timing.json"):
        assert os.path.exists(os.path.join(corpus_dir, "corpus" + suffix))
    rerun = tmp_path / "again"
    rc = main(["--seed", "3", "--config", workdir["config"], "--out",
               str(rerun), "gen-corpus", "--count", "40"])
    assert rc == 0
    with open(workdir["corpus"], "rb") as fh:
        first = fh.read()
    with open(rerun / "corpus.bin", "rb") as fh:
        again = fh.read()
    assert first == again
    stats = json.load(open(os.path.join(corpus_dir, "corpus.stats.json")))
    stats2 = json.load(open(rerun / "corpus.stats.json"))
    assert stats == stats2


def test_train_outputs_and_determinism(workdir, tmp_path):
    run = workdir["run"]
    for name in ("model.ckpt", "train_report.csv", "train_report.json",
                 "train_timing.json"):
        assert os.path.exists(run / name)
    report = json.load(open(run / "train_report.json"))
    assert len(report["epochs"]) == 6
    assert "wall_time" not in report["epochs"][0]

    rerun = tmp_path / "rerun"
    rc = main(["--seed", "3", "--config", workdir["config"], "--out",
               str(rerun), "train", "--corpus", workdir["corpus"]])
    assert rc == 0
    assert open(run / "train_report.csv").read() == open(rerun / "train_report.csv").read()
    assert open(run / "model.ckpt", "rb").read() == open(rerun / "model.ckpt", "rb").read()


def test_evaluate_in_distribution(workdir, tmp_path):
    out = tmp_path / "eval"
    rc = main(["--seed", "11", "--config", workdir["config"], "--out", str(out),
               "evaluate", "--checkpoint", workdir["checkpoint"],
               "--suite", "in-distribution", "--suite-size", "3",
               "--d-max", "1", "--max-depth", "3", "--n-points", "16"])
    assert rc == 0
    summary = json.load(open(out / "eval.json"))
    assert summary["n"] == 3
    assert 0.0 <= summary["mean_r2"] <= 1.0
    assert 0.0 <= summary["success_rate"] <= 1.0
    lines = open(out / "eval.csv").read().splitlines()
    assert lines[0].startswith("name,target,predicted,r2")
    assert len(lines) == 4
    timing = json.load(open(out / "eval.timing.json"))
    assert len(timing["wall_time_per_row"]) == 3


def test_evaluate_suite_file(workdir, tmp_path):
    suite_csv = tmp_path / "suite.csv"
    suite_csv.write_text("name,infix,d,x_low,x_high,n_points\n"
                         "lin,x1,1,-1.0,1.0,16\n")
    out = tmp_path / "eval"
    rc = main(["--seed", "2", "--config", workdir["config"], "--out", str(out),
               "evaluate", "--checkpoint", workdir["checkpoint"],
               "--suite-file", str(suite_csv)])
    assert rc == 0
    summary = json.load(open(out / "eval.json"))
    assert summary["rows"][0]["name"] == "lin"
    assert summary["rows"][0]["target"] == "x1"


def test_predict_round_trip(workdir, tmp_path, capsys):
    rng = np.random.default_rng(5)
    X = rng.uniform(-2, 2, (32, 1))
    y = 2.0 * X[:, 0] + 1.0
    points_csv = tmp_path / "points.csv"
    np.savetxt(points_csv, np.column_stack([X, y]), delimiter=",")
    out = tmp_path / "pred"
    rc = main(["--config", workdir["config"], "--out", str(out), "predict",
               "--checkpoint", workdir["checkpoint"], "--points", str(points_csv)])
    assert rc == 0
    stdout = capsys.readouterr().out
    best = json.loads(stdout)
    assert {"infix", "constants", "r2_select"} <= set(best)
    parse_infix(best["infix"])
    saved = json.load(open(out / "predict.json"))
    assert saved["best"] == best
    assert len(saved["candidates"]) >= 1


def test_align_heatmap_outputs(workdir, tmp_path):
    out = tmp_path / "align"
    rc = main(["--seed", "1", "--config", workdir["config"], "--out", str(out),
               "align-heatmap", "--checkpoint", workdir["checkpoint"],
               "--count", "5", "--d-max", "1", "--max-depth", "3",
               "--n-points", "16"])
    assert rc == 0
    grid = np.loadtxt(out / "heatmap.csv", delimiter=",")
    assert grid.shape == (5, 5)
    assert grid.min() >= 0.0 and grid.max() <= 1.0
    blob = json.load(open(out / "heatmap.json"))
    assert blob["count"] == 5
    n = grid.shape[0]
    diag = np.trace(grid) / n
    off = (grid.sum() - np.trace(grid)) / (n * n - n)
    np.testing.assert_allclose(blob["margin"], off - diag, atol=1e-12)


def test_ablate_writes_comparison(workdir, tmp_path):
    out = tmp_path / "ablate"
    rc = main(["--seed", "3", "--config", workdir["config"], "--out", str(out),
               "ablate", "--corpus", workdir["corpus"], "--weights", "0.0,1.0",
               "--count", "4", "--eval-count", "2"])
    assert rc == 0
    blob = json.load(open(out / "ablation.json"))
    assert [r["w_con"] for r in blob["results"]] == [0.0, 1.0]
    for r in blob["results"]:
        assert {"margin", "mean_r2", "success_rate", "heldout_token_acc"} <= set(r)
    for tag in ("wcon0", "wcon1"):
        assert os.path.exists(out / f"model_{tag}.ckpt")
        assert os.path.exists(out / f"eval_{tag}.json")
    lines = open(out / "ablation.csv").read().splitlines()
    assert len(lines) == 3


def test_scaling_writes_curve(workdir, tmp_path):
    out = tmp_path / "scaling"
    rc = main(["--seed", "3", "--config", workdir["config"], "--out", str(out),
               "scaling", "--sizes", "30,40", "--eval-count", "2"])
    assert rc == 0
    blob = json.load(open(out / "scaling.json"))
    assert [r["size"] for r in blob["results"]] == [30, 40]
    assert os.path.exists(out / "corpus_n30.bin")
    assert os.path.exists(out / "model_n40.ckpt")
    lines = open(out / "scaling.csv").read().splitlines()
    assert lines[0] == "size,mean_r2,success_rate,heldout_token_acc"


def test_cli_clean_errors(tmp_path, capsys):
    rc = main(["--out", str(tmp_path), "evaluate", "--checkpoint",
               str(tmp_path / "missing.ckpt")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a corpus")
    rc = main(["--out", str(tmp_path), "train", "--corpus", str(bad)])
    assert rc == 1
