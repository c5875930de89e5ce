"""End-to-end CLI tests: every subcommand against real files in tmp dirs."""

import json

import numpy as np
import pytest

from streamalign.bench import DomainSpec, generate_domain
from streamalign.cli import main
from streamalign.engine import load_stream, save_stream

TINY = {
    "dim": 8, "n_classes": 4, "train_per_class": 120, "val_per_class": 40,
    "target_samples": 240, "severity": 3, "seed": 5,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Generated domain files plus a trained model, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "domain.json"
    spec_path.write_text(json.dumps(TINY))
    assert main(["bench", "gen", "--spec", str(spec_path), "--out", str(root / "data")]) == 0
    assert main([
        "train-source",
        "--train", str(root / "data" / "source_train.npz"),
        "--val", str(root / "data" / "source_val.npz"),
        "--out", str(root / "model"),
    ]) == 0
    return root


def test_bench_gen_writes_domain_files(workdir):
    data = workdir / "data"
    for name in ("source_train.npz", "source_val.npz", "target_stream.npz", "domain.json"):
        assert (data / name).exists()
    with np.load(data / "source_train.npz") as d:
        assert d["x"].shape == (480, 8)
    stream = load_stream(data / "target_stream.npz")
    assert stream.n_samples == 240
    spec = DomainSpec.from_dict(json.loads((data / "domain.json").read_text()))
    regen = generate_domain(spec)
    np.testing.assert_array_equal(regen.stream.x, stream.x)


def test_train_source_writes_model_and_stats(workdir):
    model = workdir / "model"
    assert (model / "model.json").exists()
    assert (model / "source_stats.json").exists()
    history = json.loads((model / "train_history.json").read_text())
    assert history[-1]["val_accuracy"] >= 0.8


def test_infer_source_writes_bank(workdir, capsys):
    out = workdir / "inferred.json"
    rc = main([
        "infer-source", "--model", str(workdir / "model" / "model.json"),
        "--out", str(out),
    ])
    assert rc == 0
    bank = json.loads(out.read_text())
    assert bank["provenance"] == "inferred"
    assert "self-consistency" in capsys.readouterr().out


def test_adapt_with_source_stats(workdir, capsys):
    out = workdir / "adapt_run"
    rc = main([
        "adapt", "--protocol", "N-O-SL",
        "--model", str(workdir / "model" / "model.json"),
        "--stream", str(workdir / "data" / "target_stream.npz"),
        "--source-stats", str(workdir / "model" / "source_stats.json"),
        "--config", str(_write_cfg(workdir, {"n_b": 16, "n_c": 32, "lambda2": 1.0})),
        "--seed", "0", "--out", str(out),
    ])
    assert rc == 0
    assert "final error" in capsys.readouterr().out
    for name in ("report.json", "predictions.csv", "cumulative_error.csv",
                 "cumulative_error.png", "losses.png", "acceptance.png"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["protocol"] == "N-O-SL"
    assert len(report["predictions"]) == 240


def test_adapt_with_inferred_source(workdir):
    out = workdir / "adapt_sf"
    rc = main([
        "adapt", "--protocol", "N-O-SF",
        "--model", str(workdir / "model" / "model.json"),
        "--stream", str(workdir / "data" / "target_stream.npz"),
        "--infer-source",
        "--config", str(_write_cfg(
            workdir, {"n_b": 16, "n_c": 32, "lambda2": 1.0, "stats_grad": "mean_only"},
            name="cfg_sf.json",
        )),
        "--out", str(out),
    ])
    assert rc == 0
    assert (out / "report.json").exists()


def test_adapt_requires_exactly_one_source(workdir):
    with pytest.raises(SystemExit):
        main([
            "adapt", "--model", str(workdir / "model" / "model.json"),
            "--stream", str(workdir / "data" / "target_stream.npz"),
            "--out", str(workdir / "nope"),
        ])


def test_baseline_test_kind(workdir, capsys):
    out = workdir / "baseline_run"
    rc = main([
        "baseline", "--kind", "TEST",
        "--model", str(workdir / "model" / "model.json"),
        "--stream", str(workdir / "data" / "target_stream.npz"),
        "--out", str(out),
    ])
    assert rc == 0
    assert "final error" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["method"] == "test"


def test_bench_run_and_report(workdir, capsys):
    grid = {"cells": [
        {"name": "frozen", "method": "test", "domain": TINY, "seeds": [0, 1]},
        {"name": "adapted", "method": "full", "domain": TINY, "seeds": [0],
         "config": {"n_b": 16, "n_c": 32, "lambda2": 1.0}},
    ]}
    grid_path = workdir / "grid.json"
    grid_path.write_text(json.dumps(grid))
    out = workdir / "grid_out"
    rc = main(["bench", "run", "--grid", str(grid_path), "--out", str(out)])
    assert rc == 0
    captured = capsys.readouterr().out
    assert "ran 2 cells" in captured
    for name in ("results.csv", "results.json", "cumulative_error.dat", "summary.png"):
        assert (out / name).exists(), name

    rc = main(["bench", "report", "--in", str(out)])
    assert rc == 0
    table = capsys.readouterr().out
    assert "frozen" in table and "adapted" in table


def test_bench_run_requires_one_grid_source(workdir):
    with pytest.raises(SystemExit):
        main(["bench", "run", "--out", str(workdir / "x")])
    with pytest.raises(SystemExit):
        main(["bench", "run", "--grid", "g.json", "--default",
              "--out", str(workdir / "x")])


def test_stream_without_labels_reports_no_error(workdir, capsys, tmp_path):
    stream = load_stream(workdir / "data" / "target_stream.npz")
    from streamalign.engine import Stream

    unlabeled = tmp_path / "unlabeled.npz"
    save_stream(Stream(stream.x), unlabeled)
    out = tmp_path / "run"
    rc = main([
        "baseline", "--kind", "TEST",
        "--model", str(workdir / "model" / "model.json"),
        "--stream", str(unlabeled), "--out", str(out),
    ])
    assert rc == 0
    assert "final error" not in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["labels"] is None


def test_cli_errors_exit_2(workdir, capsys, tmp_path):
    rc = main([
        "baseline", "--kind", "TEST",
        "--model", str(tmp_path / "missing.json"),
        "--stream", str(workdir / "data" / "target_stream.npz"),
        "--out", str(tmp_path / "o"),
    ])
    assert rc == 2
    assert "error:" in capsys.readouterr().err

    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"n_b": 64, "n_c": 16}))
    rc = main([
        "adapt", "--model", str(workdir / "model" / "model.json"),
        "--stream", str(workdir / "data" / "target_stream.npz"),
        "--source-stats", str(workdir / "model" / "source_stats.json"),
        "--config", str(bad_cfg), "--out", str(tmp_path / "o2"),
    ])
    assert rc == 2


def _write_cfg(workdir, cfg, name="cfg.json"):
    path = workdir / name
    path.write_text(json.dumps(cfg))
    return path
