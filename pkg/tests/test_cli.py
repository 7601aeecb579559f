import json
import os

import pytest

from cefc.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config + generated dataset + fitted model shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "seed": 17,
        "output_dir": str(root / "out"),
        "scenario": {
            "inertia_scale": 0.85,
            "trip_set": [1, 2, 3],
            "trip_time": 5.0,
            "horizon": 30.0,
            "dt": 0.1,
        },
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["gen-data", "--config", str(cfg_path), "--train", "6", "--test", "3"]) == EXIT_OK
    assert main(["fit", "--config", str(cfg_path), "--method", "dmd"]) == EXIT_OK
    return {"root": root, "cfg_path": str(cfg_path), "out": cfg["output_dir"]}


def test_gen_data_writes_a_manifest(workspace):
    with open(os.path.join(workspace["out"], "dataset", "manifest.json")) as fh:
        manifest = json.load(fh)
    assert len(manifest["train"]) == 6
    assert len(manifest["test"]) == 3
    assert all(os.path.exists(os.path.join(workspace["out"], "dataset", e["file"])) for e in manifest["train"])


def test_fit_writes_a_model(workspace):
    assert os.path.exists(os.path.join(workspace["out"], "model_dmd.json"))


def test_predict_is_deterministic(workspace):
    model = os.path.join(workspace["out"], "model_dmd.json")
    pred = os.path.join(workspace["out"], "prediction.csv")
    outputs = []
    for _ in range(2):
        assert main(["predict", "--config", workspace["cfg_path"], "--model", model]) == EXIT_OK
        with open(pred, "rb") as fh:
            outputs.append(fh.read())
    assert outputs[0] == outputs[1]


def test_control_writes_trace_and_summary(workspace):
    model = os.path.join(workspace["out"], "model_dmd.json")
    assert main(["control", "--config", workspace["cfg_path"], "--model", model]) == EXIT_OK
    assert os.path.exists(os.path.join(workspace["out"], "control_trace.csv"))
    with open(os.path.join(workspace["out"], "control_summary.json")) as fh:
        summary = json.load(fh)
    assert "nadir_hz" in summary and "cumulative_abs_ud_mw_s" in summary


def test_prop1_reports_eight_modes(workspace):
    model = os.path.join(workspace["out"], "model_dmd.json")
    assert main(["prop1", "--config", workspace["cfg_path"], "--model", model, "--feeders", "3"]) == EXIT_OK
    with open(os.path.join(workspace["out"], "prop1_report.json")) as fh:
        report = json.load(fh)
    assert len(report["modes"]) == 8


def test_unknown_command_is_a_usage_error(workspace):
    assert main(["frobnicate", "--config", workspace["cfg_path"]]) == EXIT_USAGE


def test_missing_config_file_is_a_config_error(tmp_path):
    assert main(["fit", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_config_without_seed_is_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"output_dir": str(tmp_path / "out")}))
    assert main(["gen-data", "--config", str(path), "--train", "1", "--test", "1"]) == EXIT_CONFIG


def test_invalid_scenario_is_a_config_error(tmp_path, workspace):
    path = tmp_path / "c.json"
    cfg = {
        "seed": 1,
        "output_dir": str(tmp_path / "out"),
        "scenario": {"trip_set": [0], "trip_time": 5.0, "horizon": 10.0, "dt": 0.1},
    }
    path.write_text(json.dumps(cfg))
    model = os.path.join(workspace["out"], "model_dmd.json")
    assert main(["predict", "--config", str(path), "--model", model]) == EXIT_CONFIG


def test_diverging_scenario_is_a_numerical_error(tmp_path, workspace):
    path = tmp_path / "c.json"
    cfg = {
        "seed": 1,
        "output_dir": str(tmp_path / "out"),
        "scenario": {
            "trip_set": [1],
            "extra_deficit": 8.0,
            "trip_time": 5.0,
            "horizon": 30.0,
            "dt": 0.1,
        },
    }
    path.write_text(json.dumps(cfg))
    model = os.path.join(workspace["out"], "model_dmd.json")
    assert main(["predict", "--config", str(path), "--model", model]) == EXIT_NUMERICAL
