import json
import logging
import os
from pathlib import Path

import pandas as pd
import pytest

from apps.cli.app import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--domains", "2", "--cycles-per-domain", "4/4", "--seed", "1"]) == 0
    config = root / "train.env"
    config.write_text("K=9\nbatch=8\nepochs=3\nsnapshot-every=1\ndbt=true\n")
    run = root / "run"
    code = main(["train", "--config", str(config), "--data", str(data), "--out", str(run),
                 "--epochs", "2", "--iterations-per-epoch", "1", "--val-fraction", "0.25", "--prefetch", "0"])
    assert code == 0
    return root


def test_gen_data_counts(tmp_path):
    out = tmp_path / "balanced"
    assert main(["gen-data", "--out", str(out), "--cycles-per-domain", "100/100", "--workers", "4"]) == 0
    assert len(list(out.glob("*.wav"))) == 400
    assert sorted(p.name for p in out.glob("*.csv")) == ["cycles.csv", "labels.csv"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 0


def test_imbalanced_preset_share(tmp_path):
    out = tmp_path / "imbalanced"
    assert main(["gen-data", "--preset", "imbalanced", "--out", str(out), "--cycles-per-domain", "3/2",
                 "--domains", "3"]) == 0
    labels = pd.read_csv(out / "labels.csv")
    normals = labels[labels["label"] == "Normal"]
    assert (normals["domain"] == 0).mean() >= 0.70


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--cycles-per-domain", "3/3", "--seed", "7"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "manifest.json")
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir() if p.name != "manifest.json")
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_unknown_preset_exits_2(tmp_path, capsys):
    assert main(["gen-data", "--preset", "noisy", "--out", str(tmp_path)]) == 2
    assert "unknown preset" in capsys.readouterr().err


def test_train_writes_all_artifacts(workspace):
    run = workspace / "run"
    for name in ("model.json", "trace.jsonl", "manifest.json", "val_report.json", "val_report.md"):
        assert (run / name).exists(), name
    assert sorted(p.name for p in (run / "snapshots").iterdir()) == [
        "snapshot_epoch_0000.json", "snapshot_epoch_0001.json", "snapshot_epoch_0002.json",
    ]
    assert len((run / "trace.jsonl").read_text().splitlines()) == 2


def test_config_file_precedence(workspace):
    config = json.loads((workspace / "run" / "manifest.json").read_text())["config"]
    assert config["K"] == 9 and config["batch"] == 8
    assert config["epochs"] == 2
    assert config["dbt"] is True


def test_parity_error_exits_2(workspace, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--frontend", "type3", "--K", "60",
                 "--out", str(workspace / "bad")])
    assert code == 2
    assert "odd" in capsys.readouterr().err


def test_batch_smaller_than_queues_exits_2(tmp_path, capsys):
    data = tmp_path / "six"
    assert main(["gen-data", "--out", str(data), "--domains", "6", "--cycles-per-domain", "1/1"]) == 0
    code = main(["train", "--data", str(data), "--batch", "11", "--val-fraction", "0", "--K", "9",
                 "--out", str(tmp_path / "run")])
    assert code == 2
    assert "B_eff=0" in capsys.readouterr().err


def test_eval_report(workspace):
    report_path = workspace / "reports" / "eval.json"
    code = main(["eval", "--model", str(workspace / "run" / "model.json"), "--data", str(workspace / "data"),
                 "--report", str(report_path)])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["macc"] == (report["sensitivity"] + report["specificity"]) / 2
    assert set(report["per_domain_accuracy"]) == {"0", "1"}
    assert report["n_recordings"] == 16
    assert (workspace / "reports" / "manifest.json").exists()


def test_eval_config_mismatch_and_missing_model(workspace):
    model = str(workspace / "run" / "model.json")
    data = str(workspace / "data")
    assert main(["eval", "--model", model, "--data", data, "--K", "11", "--out", str(workspace / "e1")]) == 2
    assert main(["eval", "--model", str(workspace / "nope.json"), "--data", data,
                 "--out", str(workspace / "e2")]) == 3


def test_gradcam_exports(workspace):
    out = workspace / "cam"
    code = main(["gradcam", "--model", str(workspace / "run" / "model.json"), "--data", str(workspace / "data"),
                 "--n", "3", "--label", "abnormal", "--out", str(out)])
    assert code == 0
    assert len(list(out.glob("gradcam_*.csv"))) == 3
    summary = json.loads((out / "gradcam_summary.json").read_text())
    assert all(row["label"] == "Abnormal" for row in summary)


def test_analyze_exports(workspace):
    out = workspace / "analysis"
    code = main(["analyze", "--model", str(workspace / "run" / "model.json"),
                 "--snapshots", str(workspace / "run" / "snapshots"), "--out", str(out)])
    assert code == 0
    kernels = json.loads((out / "kernels.json").read_text())
    assert len(kernels) == 4 and kernels[0]["K"] == 9
    assert all((out / f"kernel_{i}_response.csv").exists() for i in range(4))
    audit = pd.read_csv(out / "phase_audit.csv")
    assert audit["epoch"].tolist() == [0, 1, 2]
    assert (audit["max_residual"] < 1e-6).all()
    assert not (out / "gammatone_trace.csv").exists()


def test_compare_model_with_itself(workspace):
    model = str(workspace / "run" / "model.json")
    report_path = workspace / "compare" / "compare.json"
    assert main(["compare", "--model-a", model, "--model-b", model, "--data", str(workspace / "data"),
                 "--report", str(report_path)]) == 0
    result = json.loads(report_path.read_text())
    assert result["mcnemar"] == {"statistic": 0.0, "p_value": 1.0}
    assert result["model_a"]["macc"] == result["model_b"]["macc"]


def test_missing_config_file(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "none.env"), "--out", str(tmp_path)]) == 2
    bad = Path(tmp_path / "bad.env")
    bad.write_text("flux=3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("line", ["seed=abc", "log-level=verbose", "dbt=true", "help=1"])
def test_config_values_checked_against_flags(tmp_path, line, capsys):
    config = tmp_path / "gen.env"
    config.write_text(line + "\n")
    assert main(["gen-data", "--config", str(config), "--out", str(tmp_path / "out")]) == 2
    assert "config" in capsys.readouterr().err


def test_config_supplies_required_flags_and_log_level(workspace, tmp_path):
    config = tmp_path / "eval.env"
    config.write_text(f"model={workspace / 'run' / 'model.json'}\ndata={workspace / 'data'}\nlog-level=debug\n")
    root = logging.getLogger()
    level = root.level
    try:
        assert main(["eval", "--config", str(config), "--out", str(tmp_path / "out")]) == 0
        assert root.level == logging.DEBUG
    finally:
        root.setLevel(level)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config"]["log_level"] == "DEBUG"
    assert manifest["config"]["model"].endswith("model.json")
    assert (tmp_path / "out" / "eval_report.json").exists()


def test_default_out_uses_output_root(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen-data", "--cycles-per-domain", "1/1"]) == 0
    assert os.path.exists(os.path.join("runs", "gen-data", "labels.csv"))
