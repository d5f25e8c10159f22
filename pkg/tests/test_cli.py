import json
import os

import pytest

from curricuids.cli import main

FAST = ["--epochs", "2", "--patience", "2", "--lime-samples", "120", "--folds", "3",
        "--oof-epochs", "1", "--n-trees", "5", "--n-rounds", "5", "--explain", "2"]


@pytest.fixture(scope="module")
def csv_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "iov.csv"
    assert main(["synth", "--seed", "3", "--n-per-stage", "400", "--out", str(out)]) == 0
    return str(out)


@pytest.fixture(scope="module")
def run_dir(csv_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run") / "r")
    code = main(["train", "--seed", "3", "--data", csv_path, "--plan", "cic-iov-2024", "--out", out, *FAST])
    assert code == 0
    return out


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate", "--seed", "1"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_seed_is_usage_error(csv_path, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "x.csv")]) == 1


def test_no_subcommand(capsys):
    assert main([]) == 1


def test_synth_writes_truth(csv_path):
    with open(os.path.splitext(csv_path)[0] + ".truth.json") as fh:
        truth = json.load(fh)
    assert truth["decoy_features"] == [14, 15]
    assert truth["rows"] > 0


def test_plan_counts(csv_path, capsys):
    assert main(["plan", "--seed", "0", "--plan", "cic-iov-2024", "--data", csv_path]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert all(v > 0 for v in doc["counts"].values())


def test_empty_stage_is_runtime_failure(csv_path, tmp_path, capsys):
    plan = {"dataset_kind": "custom", "stages": {
        "1": {"name": "normal", "patterns": ["normal"]},
        "2": {"name": "ghost", "patterns": ["NO_SUCH_TAG"]}}}
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(plan))
    code = main(["train", "--seed", "0", "--data", csv_path, "--plan", str(path),
                 "--out", str(tmp_path / "run"), *FAST])
    assert code == 2
    assert "EmptyStage" in capsys.readouterr().err


def test_missing_data_file(tmp_path, capsys):
    code = main(["evaluate", "--seed", "0", "--model", str(tmp_path / "nope.json"),
                 "--data", str(tmp_path / "nope.csv")])
    assert code == 2


def test_train_layout(run_dir):
    for rel in ("manifest.json", "metrics.json", "timing.json", "checkpoints/model.json",
                "checkpoints/quantized.json", "checkpoints/ensemble.json", "data/test.csv",
                "stages/stage_1.json", "stages/stage_3.json", "explanations/test_0.json"):
        assert os.path.isfile(os.path.join(run_dir, rel)), rel
    with open(os.path.join(run_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["seed"] == 3
    assert manifest["ensemble"]["oof_audit_passed"] is True
    assert "train_seconds" not in json.dumps(manifest)


@pytest.mark.parametrize("ckpt", ["model.json", "quantized.json", "ensemble.json", "pruned.json"])
def test_evaluate_prints_metrics(run_dir, ckpt, capsys):
    capsys.readouterr()
    code = main(["evaluate", "--seed", "0", "--model", os.path.join(run_dir, "checkpoints", ckpt),
                 "--data", os.path.join(run_dir, "data", "test.csv")])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["schema"] == "curricuids.metrics/1"
    assert 0.0 <= doc["accuracy"] <= 1.0
    assert doc["windows"] > 0


def test_evaluate_matches_training_report(run_dir, capsys):
    capsys.readouterr()
    main(["evaluate", "--seed", "0", "--model", os.path.join(run_dir, "checkpoints", "model.json"),
          "--data", os.path.join(run_dir, "data", "test.csv")])
    doc = json.loads(capsys.readouterr().out)
    with open(os.path.join(run_dir, "metrics.json")) as fh:
        trained = json.load(fh)
    assert doc["windows"] == trained["test_windows"]
    assert doc["accuracy"] == pytest.approx(trained["reports"]["curriculum"]["accuracy"], abs=1e-12)


def test_explain_and_compress(run_dir, tmp_path, capsys):
    model = os.path.join(run_dir, "checkpoints", "model.json")
    test_csv = os.path.join(run_dir, "data", "test.csv")
    assert main(["explain", "--seed", "0", "--model", model, "--data", test_csv, "--instance", "1",
                 "--num-samples", "100", "--out", str(tmp_path / "exp")]) == 0
    assert os.path.isfile(tmp_path / "exp" / "instance_1.json")
    assert main(["explain", "--seed", "0", "--model", model, "--data", test_csv, "--instance", "99999",
                 "--out", str(tmp_path / "exp")]) == 2
    capsys.readouterr()
    assert main(["compress", "--seed", "0", "--model", model, "--data", test_csv,
                 "--out", str(tmp_path / "cmp")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["achieved_sparsity"] - 0.5) < 0.01
    assert report["quantized_sparse"]["quantized_bytes"] < report["dense"]["quantized_bytes"]
    assert report["dense"]["float_bytes"] == 4 * report["dense"]["parameter_total"]


def test_synth_creates_missing_directories(tmp_path):
    out = tmp_path / "nested" / "dir" / "iov.csv"
    assert main(["synth", "--seed", "1", "--n-per-stage", "50", "--out", str(out)]) == 0
    assert out.is_file()
