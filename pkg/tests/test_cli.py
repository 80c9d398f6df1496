"""
Tests for the command-line entry point and its exit codes.
"""
import json
import shutil

import pytest

from conftest import MINIMAL_CONFIG
from main import main
from robustness.models import constant_model, linear_sigmoid
from utils.data_loader import load_json, points_frame, read_csv, save_model, write_csv


def _write_config(path, config):
    with open(path, "w") as f:
        json.dump(config, f)
    return str(path)


@pytest.fixture
def linear_inputs(tmp_path):
    model = save_model(str(tmp_path / "model.json"), linear_sigmoid([1.0, 0.0]))
    queries = write_csv(str(tmp_path / "queries.csv"), points_frame([[-1.0, 0.0], [-2.0, 0.0]]))
    return model, queries


class TestExitCodes:

    def test_selftest(self, capsys):
        assert main(["-q", "selftest"]) == 0
        assert "checks passed" in capsys.readouterr().out

    def test_unknown_config_key(self, tmp_path):
        config = dict(MINIMAL_CONFIG, extra=1)
        assert main(["run", "--config", _write_config(tmp_path / "c.json", config),
                     "--out", str(tmp_path / "out")]) == 2
        assert not (tmp_path / "out").exists()

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2

    def test_missing_plot_source(self, tmp_path):
        assert main(["emit-plot-data", "--out", str(tmp_path), "--figure", "bound-curves"]) == 2

    def test_infeasible_counterfactual(self, tmp_path):
        model = save_model(str(tmp_path / "model.json"), constant_model(0.3, 2))
        queries = write_csv(str(tmp_path / "queries.csv"), points_frame([[0.0, 0.0]]))
        assert main(["counterfactual", "--model", model, "--queries", queries, "--out", str(tmp_path)]) == 3

    def test_query_already_positive(self, tmp_path):
        model = save_model(str(tmp_path / "model.json"), linear_sigmoid([1.0, 0.0]))
        queries = write_csv(str(tmp_path / "queries.csv"), points_frame([[1.0, 0.0]]))
        assert main(["counterfactual", "--model", model, "--queries", queries, "--out", str(tmp_path)]) == 2


class TestCommands:

    def test_resumed_run(self, completed_run, tmp_path, capsys):
        out = tmp_path / "run"
        shutil.copytree(completed_run.out_dir, out)
        config = _write_config(tmp_path / "c.json", MINIMAL_CONFIG)
        assert main(["-q", "run", "--config", config, "--out", str(out), "--resume"]) == 0
        printed = capsys.readouterr().out
        assert f"config_hash={completed_run.config_hash}" in printed
        assert "bound verification:" in printed
        assert "robustness test:" in printed

    def test_verify_bounds(self, completed_run, tmp_path, capsys):
        out = tmp_path / "run"
        shutil.copytree(completed_run.out_dir, out)
        config = _write_config(tmp_path / "c.json", MINIMAL_CONFIG)
        assert main(["-q", "verify-bounds", "--config", config, "--out", str(out)]) == 0
        assert "bound verification:" in capsys.readouterr().out

    def test_counterfactual(self, linear_inputs, tmp_path):
        model, queries = linear_inputs
        assert main(["-q", "counterfactual", "--model", model, "--queries", queries, "--out", str(tmp_path)]) == 0
        frame = read_csv(str(tmp_path / "counterfactuals.csv"))
        assert list(frame["cost"]) == pytest.approx([1.0, 2.0], abs=1e-9)

    def test_stability(self, linear_inputs, tmp_path):
        model, queries = linear_inputs
        assert main(["-q", "stability", "--model", model, "--queries", queries, "--k", "50",
                     "--tau", "0.2", "--out", str(tmp_path)]) == 0
        data = load_json(str(tmp_path / "stability.json"))
        assert [r["query"] for r in data["reports"]] == [0, 1]
        assert all(r["R"] is None for r in data["reports"])
        assert data["reports"][0]["Rhat"] > data["reports"][1]["Rhat"]
        assert "config_hash" in data

    def test_stability_with_gamma(self, linear_inputs, tmp_path):
        model, queries = linear_inputs
        assert main(["-q", "stability", "--model", model, "--queries", queries, "--gamma", "0.25",
                     "--out", str(tmp_path)]) == 0
        for r in load_json(str(tmp_path / "stability.json"))["reports"]:
            assert r["Rhat"] >= r["R"]

    def test_emit_plot_data_render(self, completed_run, tmp_path, capsys):
        out = tmp_path / "run"
        shutil.copytree(completed_run.out_dir, out)
        assert main(["-q", "emit-plot-data", "--out", str(out), "--figure", "validity-vs-tau", "--render"]) == 0
        assert (out / "plot_validity_vs_tau.csv").exists()
        assert (out / "plot_validity_vs_tau.html").exists()
