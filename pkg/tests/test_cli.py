import json

import numpy as np
import pytest

from lobdiff.cli import main

TINY_TRAIN_CONFIG = {
    "model": {
        "n_blocks": 2, "channels": 8, "t_emb_dim": 16, "local_dim": 8, "global_dim": 8,
    },
    "schedule": {"n": 20, "beta_min": 0.005, "beta_max": 0.35},
    "train": {"lr": 1e-3, "batch_size": 128, "max_epochs": 2, "patience": 50},
}


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "ingest" in capsys.readouterr().out


def test_unknown_flag_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["ingest", "--does-not-exist"])
    assert exc.value.code == 1
    assert "error" in capsys.readouterr().err


def test_conflicting_sources_exit_one(tmp_path, capsys):
    code = main(["ingest", "--synthetic", "--data", "x.csv", "--out", str(tmp_path / "o")])
    assert code == 1
    code = main(["ingest", "--out", str(tmp_path / "o2")])
    assert code == 1


def test_existing_out_dir_refused(tmp_path):
    out = tmp_path / "exists"
    out.mkdir()
    code = main(["ingest", "--synthetic", "--seed", "1", "--n-seconds", "120",
                 "--out", str(out)])
    assert code == 1


def test_missing_data_file_exits_two(tmp_path):
    code = main(["ingest", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
    assert code == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full tiny pipeline: ingest -> preprocess -> train -> sample -> eval."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "train_config.json"
    cfg.write_text(json.dumps(TINY_TRAIN_CONFIG))

    assert main(["ingest", "--synthetic", "--seed", "5", "--n-seconds", "500",
                 "--out", str(root / "series")]) == 0
    assert main(["preprocess", "--series", str(root / "series"),
                 "--split-frac", "0.7,0.15,0.15", "--out", str(root / "windows")]) == 0
    assert main(["train", "--windows", str(root / "windows"), "--config", str(cfg),
                 "--stage", "both", "--seed", "3", "--out", str(root / "run")]) == 0
    return root


def test_pipeline_train_artifacts(pipeline):
    run = pipeline / "run"
    assert (run / "stage1" / "metrics.csv").exists()
    assert (run / "stage2" / "metrics.csv").exists()
    assert (run / "checkpoint-final" / "manifest.json").exists()
    manifest = json.loads((run / "checkpoint-final" / "manifest.json").read_text())
    assert manifest["stage"] == 2
    assert manifest["control_params"]


def test_pipeline_sample_observed_and_intervened(pipeline):
    out = pipeline / "sampled"
    assert main(["sample", "--checkpoint", str(pipeline / "run" / "checkpoint-final"),
                 "--windows", str(pipeline / "windows" / "test"),
                 "--n", "6", "--seed", "11", "--out", str(out)]) == 0
    meta = json.loads((out / "run_config.json").read_text())
    n, levels, chans, tau = meta["shape"]
    assert (n, chans, tau) == (6, 2, 32)
    grids = np.fromfile(out / "generated.f32le", dtype="<f4").reshape(meta["shape"])
    assert np.all(np.isfinite(grids))

    out2 = pipeline / "sampled-high-trend"
    assert main(["sample", "--checkpoint", str(pipeline / "run" / "checkpoint-final"),
                 "--windows", str(pipeline / "windows" / "train"),
                 "--n", "6", "--seed", "11", "--regime", "trend", "--side", "high",
                 "--out", str(out2)]) == 0


def test_pipeline_eval_realism(pipeline):
    out = pipeline / "eval-realism"
    assert main(["eval", "realism",
                 "--checkpoint", str(pipeline / "run" / "checkpoint-final"),
                 "--windows", str(pipeline / "windows" / "test"),
                 "--seed", "7", "--plots", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["groups"]) == {"price", "volume"}
    assert (out / "facts" / "returns_h1.csv").exists()
    assert (out / "facts" / "volume_diff_corr_real.csv").exists()
    assert (out / "plots" / "spread.png").exists()


def test_pipeline_eval_counterfactual(pipeline):
    out = pipeline / "eval-cf"
    assert main(["eval", "counterfactual",
                 "--checkpoint", str(pipeline / "run" / "checkpoint-final"),
                 "--windows", str(pipeline / "windows" / "test"),
                 "--train-windows", str(pipeline / "windows" / "train"),
                 "--n-per-side", "10", "--seed", "7", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["scenarios"]) == 4
    assert (out / "high-trend" / "report.json").exists()
    assert (out / "low-imb" / "report.json").exists()
    assert (out / "summary.csv").read_text().startswith("component,")


def test_pipeline_eval_usefulness(pipeline):
    out = pipeline / "eval-useful"
    assert main(["eval", "usefulness",
                 "--checkpoint", str(pipeline / "run" / "checkpoint-final"),
                 "--windows", str(pipeline / "windows" / "test"),
                 "--train-windows", str(pipeline / "windows" / "train"),
                 "--cf-per-side", "10", "--seed", "7", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["table"]) == {"trend", "liquidity"}
    for task in report["table"].values():
        assert set(task) == {"real", "real_x2", "real_cf"}


def test_eval_requires_train_windows(pipeline, tmp_path):
    code = main(["eval", "usefulness",
                 "--checkpoint", str(pipeline / "run" / "checkpoint-final"),
                 "--windows", str(pipeline / "windows" / "test"),
                 "--out", str(tmp_path / "x")])
    assert code == 1


def test_run_config_echoed(pipeline):
    for sub in ("series", "windows", "run"):
        assert (pipeline / sub / "run_config.json").exists()
