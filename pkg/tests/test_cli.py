import json
import subprocess
import sys

import numpy as np
import pytest

from halognn.cli import main
from halognn.mesh import read_trajectory

DATASET_SPEC = {
    "n_train": 2, "n_valid": 2, "seed": 3,
    "geometry": {"nx": 12, "ny": 8},
    "dynamics": {"n_steps": 6, "diffusion": 0.04, "advection": 0.4,
                 "source_amplitude": 0.4, "dt": 0.05},
    "radius_range": [0.16, 0.22],
    "center_x_range": [1.0, 1.5],
    "center_y_range": [0.9, 1.1],
}

TRAIN_CONFIG = {
    "seed": 5,
    "model": {"message_passing_steps": 2, "latent_size": 8},
    "train": {"mode": "single", "n_parts": 1, "steps": 4},
    "data": {"manifest": ""},
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(DATASET_SPEC))
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(root / "ds")]) == 0
    return root / "ds" / "manifest.json"


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    root = tmp_path_factory.mktemp("run")
    cfg = dict(TRAIN_CONFIG)
    cfg["data"] = {"manifest": str(dataset)}
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = root / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


class TestGenData(object):
    def test_manifest_exists(self, dataset):
        assert dataset.exists()
        doc = json.loads(dataset.read_text())
        assert len(doc["trajectories"]) == 4


class TestPartitionCommand:
    def test_plan_matches_fixture(self, dataset, tmp_path, capsys):
        traj_path = dataset.parent / "train_000.mgnt"
        out = tmp_path / "plan.json"
        code = main(["partition", "--trajectory", str(traj_path), "--parts", "2",
                     "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        traj = read_trajectory(traj_path)
        owned = [set(part) for part in doc["owned"]]
        assert sum(len(p) for p in owned) == traj.mesh.n_nodes
        assert "edge_cut" in capsys.readouterr().out

    def test_missing_file_exit_2(self, capsys):
        assert main(["partition", "--trajectory", "/nonexistent.mgnt",
                     "--parts", "2"]) == 2
        err = capsys.readouterr().err.strip()
        doc = json.loads(err)
        assert doc["code"] == 2
        assert "nonexistent" in doc["message"]


class TestTrainCommand:
    def test_outputs_exist(self, trained):
        for name in ("resolved_config.json", "train_log.csv", "checkpoint.mgnc",
                     "trace.json"):
            assert (trained / name).exists(), name

    def test_resolved_config_relaunchable(self, trained, tmp_path):
        resolved = trained / "resolved_config.json"
        out2 = tmp_path / "out2"
        assert main(["train", "--config", str(resolved), "--out", str(out2)]) == 0
        assert (out2 / "checkpoint.mgnc").read_bytes() == \
            (trained / "checkpoint.mgnc").read_bytes()

    def test_log_has_loss_per_step(self, trained):
        lines = (trained / "train_log.csv").read_text().strip().splitlines()
        assert lines[0] == "step,loss,lr,wallclock"
        assert len(lines) == 1 + TRAIN_CONFIG["train"]["steps"]

    def test_unknown_config_key_exit_1(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"typo_key": 1}))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
        assert json.loads(capsys.readouterr().err)["code"] == 1

    def test_missing_manifest_exit_2(self, tmp_path, capsys):
        cfg = dict(TRAIN_CONFIG)
        cfg["data"] = {"manifest": str(tmp_path / "missing.json")}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        doc = json.loads(capsys.readouterr().err)
        assert doc["code"] == 2 and "missing.json" in doc["message"]


class TestEvalCommand:
    def test_eval_writes_metrics(self, trained, dataset, tmp_path, capsys):
        out = tmp_path / "metrics.csv"
        code = main(["eval", "--checkpoint", str(trained / "checkpoint.mgnc"),
                     "--manifest", str(dataset), "--horizons", "1,full",
                     "--out", str(out)])
        assert code == 0
        text = out.read_text()
        assert "rmse" in text
        assert "e_temporal_std" in text
        assert "rmse_1" in capsys.readouterr().out

    def test_corrupt_checkpoint_exit_2(self, tmp_path, dataset, capsys):
        bad = tmp_path / "bad.mgnc"
        bad.write_bytes(b"JUNKJUNKJUNK")
        assert main(["eval", "--checkpoint", str(bad),
                     "--manifest", str(dataset)]) == 2
        assert json.loads(capsys.readouterr().err)["code"] == 2


class TestRolloutCommand:
    def test_dump_is_valid_trajectory(self, trained, dataset, tmp_path):
        src = dataset.parent / "valid_000.mgnt"
        out = tmp_path / "rollout.mgnt"
        code = main(["rollout", "--checkpoint", str(trained / "checkpoint.mgnc"),
                     "--trajectory", str(src), "--horizon", "3", "--out", str(out)])
        assert code == 0
        dumped = read_trajectory(out)
        assert dumped.n_steps == 4  # seed state + 3 predictions
        original = read_trajectory(src)
        assert np.array_equal(dumped.states[0], original.states[0])


class TestPerfCommand:
    def test_report_from_trace(self, trained, tmp_path, capsys):
        out = tmp_path / "report.csv"
        code = main(["perf", "--trace", str(trained / "trace.json"),
                     "--out", str(out)])
        assert code == 0
        assert "runtime split" in capsys.readouterr().out
        assert "fraction_computational" in out.read_text()


class TestCompareCommand:
    def test_side_by_side(self, trained, dataset, tmp_path, capsys):
        out = tmp_path / "cmp.csv"
        code = main(["compare", "--checkpoint-a", str(trained / "checkpoint.mgnc"),
                     "--checkpoint-b", str(trained / "checkpoint.mgnc"),
                     "--manifest", str(dataset), "--horizons", "1",
                     "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "near-stationary" in stdout
        text = out.read_text()
        assert "rmse_1" in text and "e_temporal_std_mean" in text


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "halognn.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
