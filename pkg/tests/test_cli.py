"""
Tests for the command-line entry point: exit codes and output files.
"""
import json
import logging
import sys

import pytest

from oscgnn.main import main

QUICK = ["--set", "hidden_dim=4", "--set", "layers=2", "--set", "epochs=3", "--set", "patience=null", "--set", "attn_dim=2"]


def read(path):
    return json.loads(path.read_text())


@pytest.fixture
def sbm_dir(tmp_path):
    out = tmp_path / "sbm"
    assert main(["make-sbm", "--nodes-per-block", "20", "--train-per-class", "5", "--val-count", "5", "--out", str(out)]) == 0
    return out / "bundle"


class TestStatistics:
    """ttest subcommand."""

    def test_ttest_writes_result(self, tmp_path, capsys):
        code = main(["ttest", "--mu1", "82.92", "--s1", "1.39", "--mu2", "82.35", "--s2", "1.61", "--n", "100", "--out", str(tmp_path)])
        assert code == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["t_score"] == pytest.approx(2.68, abs=0.02)
        assert read(tmp_path / "ttest.json")["significant"] is True
        assert (tmp_path / "effective_config.json").exists()

    def test_ttest_zero_variance(self, tmp_path, capsys):
        code = main(["ttest", "--mu1", "1", "--s1", "0", "--mu2", "0", "--s2", "0", "--n", "10", "--out", str(tmp_path)])
        assert code == 3
        assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "DegenerateVarianceError"


class TestSimulate:
    """simulate subcommand."""

    def test_critical_oscillator_decays_algebraically(self, tmp_path):
        code = main(["simulate", "--system", "sl", "--params", "0,1,1,0", "--tmax", "400", "--dt", "1", "--out", str(tmp_path)])
        assert code == 0
        decay = read(tmp_path / "analysis.json")["decay"]
        assert decay["kind"] == "algebraic"
        assert decay["rate"] == pytest.approx(-0.5, abs=0.05)
        assert (tmp_path / "trajectory.csv").read_text().startswith("t,node,re,im")

    def test_imex_ring(self, tmp_path):
        code = main(["simulate", "--system", "sl", "--graph", "ring:5", "--params", "1,1,0,0", "--solver", "imex", "--tmax", "5", "--dt", "0.1", "--out", str(tmp_path)])
        assert code == 0
        assert read(tmp_path / "analysis.json")["nodes"] == 5

    def test_harmonic_symplectic(self, tmp_path):
        code = main(["simulate", "--system", "harmonic", "--graph", "ring:4", "--params", "0,1", "--solver", "symplectic", "--tmax", "10", "--dt", "0.01", "--out", str(tmp_path)])
        assert code == 0
        assert read(tmp_path / "analysis.json")["regime"] == "undamped"

    def test_kuramoto_rejects_imex(self, tmp_path, capsys):
        code = main(["simulate", "--system", "kuramoto", "--params", "1", "--solver", "imex", "--out", str(tmp_path)])
        assert code == 2
        assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "UsageError"

    def test_wrong_parameter_count(self, tmp_path):
        assert main(["simulate", "--system", "sl", "--params", "1,1", "--out", str(tmp_path)]) == 2

    def test_missing_edge_file(self, tmp_path):
        code = main(["simulate", "--system", "kuramoto", "--params", "1", "--graph", f"file:{tmp_path / 'none.csv'}", "--out", str(tmp_path)])
        assert code == 4


class TestTraining:
    """train, eval, sweep-depth and perturb subcommands."""

    def test_out_of_range_learning_rate(self, tmp_path, capsys):
        assert main(["train", "--set", "lr=0.5", "--out", str(tmp_path)]) == 2
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["details"]["keys"] == ["lr"]

    def test_unknown_key(self, tmp_path):
        assert main(["train", "--set", "learning_rate=0.001", "--out", str(tmp_path)]) == 2

    def test_missing_bundle(self, tmp_path):
        assert main(["train", "--set", f"data={tmp_path / 'absent'}", *QUICK, "--out", str(tmp_path / "run")]) == 4

    def test_train_then_eval(self, tmp_path, sbm_dir):
        run = tmp_path / "run"
        assert main(["train", "--set", f"data={sbm_dir}", *QUICK, "--out", str(run)]) == 0
        assert read(run / "effective_config.json")["layers"] == 2
        metrics = read(run / "metrics.json")
        assert metrics["epochs_run"] == 3
        assert (run / "checkpoint" / "params.bin").exists()
        assert (run / "run.log").exists()

        evaluated = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--set", f"data={sbm_dir}", "--out", str(evaluated)]) == 0
        assert read(evaluated / "eval.json")["test_metric"] == pytest.approx(metrics["test_metric"])

    def test_config_file_with_override(self, tmp_path, sbm_dir):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"data": str(sbm_dir), "hidden_dim": 4, "layers": 1, "epochs": 2, "patience": None, "family": "kuramoto"}))
        assert main(["train", "--config", str(config), "--set", "coupling=tran", "--out", str(tmp_path / "run")]) == 0
        effective = read(tmp_path / "run" / "effective_config.json")
        assert (effective["family"], effective["coupling"]) == ("kuramoto", "tran")

    def test_depth_sweep(self, tmp_path, sbm_dir):
        assert main(["sweep-depth", "--depths", "1,2", "--set", f"data={sbm_dir}", *QUICK, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "depth_sweep.csv").read_text().splitlines()
        assert lines[0] == "depth,test_metric,val_metric,epochs_run"
        assert len(lines) == 3

    def test_perturb(self, tmp_path, sbm_dir):
        code = main(["perturb", "--edges", "0,4", "--trials", "2", "--jobs", "1", "--set", f"data={sbm_dir}", *QUICK, "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "robustness.csv").read_text().splitlines()[0] == "level,mean,p25,p75"

    def test_negative_fake_edges(self, tmp_path):
        assert main(["perturb", "--edges", "-1", "--out", str(tmp_path)]) == 2


class TestGradcheck:
    """gradcheck subcommand."""

    @pytest.mark.parametrize("family", ["slgnn", "kuramoto"])
    def test_passes_and_writes_report(self, family, tmp_path):
        assert main(["gradcheck", "--family", family, "--coupling", "gat", "--out", str(tmp_path)]) == 0
        report = read(tmp_path / "gradcheck.json")
        assert report["max_relative_error"] < 1e-4
        assert "layer0.W" in report["per_parameter"]


class TestLogging:
    """Console logging across repeated in-process runs."""

    def test_console_handler_follows_current_stderr(self, tmp_path):
        for run in range(2):
            code = main(["ttest", "--mu1", "2", "--s1", "1", "--mu2", "1", "--s2", "1", "--n", "10", "--out", str(tmp_path / str(run))])
            assert code == 0
            consoles = [h for h in logging.getLogger().handlers if type(h) is logging.StreamHandler]
            assert len(consoles) == 1
            assert consoles[0].stream is sys.stderr
