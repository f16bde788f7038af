import json

import numpy as np
import pytest

from calm.cli import dgp_preset, main
from calm.predictor import read_predictions


def _files(cli_inputs):
    return ["--data", cli_inputs["data"], "--propensity", cli_inputs["propensity"]]


def _analyze(cli_inputs, *extra):
    return ["analyze", *_files(cli_inputs), "--predictions", cli_inputs["predictions"], *extra]


class TestAnalyze:
    def test_zero_shot(self, cli_inputs, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(_analyze(cli_inputs, "--arm", "1", "--seed", "3", "--out", str(out))) == 0
        doc = json.loads(out.read_text())
        rep = doc["reports"][0]
        assert rep["ci"][0] <= rep["point"] <= rep["ci"][1]
        assert doc["seed"] == 3 and doc["config"]["arm"] == 1 and "threads" not in doc["config"]
        text = capsys.readouterr().out
        assert "seed: 3" in text and "calm-zero" in text and "estimate" in text

    def test_robust_echo(self, cli_inputs, tmp_path):
        out = tmp_path / "r.json"
        assert main(_analyze(cli_inputs, "--arm", "2", "--weight", "robust", "--coarsen", "quartile",
                             "--out", str(out))) == 0
        doc = json.loads(out.read_text())
        assert doc["weight"] == "robust" and doc["reports"][0]["config"]["weight"] == "robust"

    def test_contrast_and_cate(self, cli_inputs, tmp_path):
        out = tmp_path / "r.json"
        assert main(_analyze(cli_inputs, "--contrast", "1,2", "--cate-at", "0,0;0.5,-0.5", "--out", str(out))) == 0
        reps = json.loads(out.read_text())["reports"]
        assert [r["estimand"] for r in reps] == ["cate_at_x", "cate_at_x"]

    def test_aipw(self, cli_inputs, tmp_path):
        out = tmp_path / "r.json"
        assert main(["analyze", *_files(cli_inputs), "--estimator", "aipw", "--arm", "1", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["weight"] == "none"

    def test_missing_subject(self, cli_inputs, tmp_path, capsys):
        lines = open(cli_inputs["predictions"]).read().splitlines()
        dropped = json.loads(lines[0])["id"]
        partial = tmp_path / "partial.jsonl"
        partial.write_text("\n".join(lines[1:]) + "\n")
        args = ["analyze", *_files(cli_inputs), "--predictions", str(partial), "--arm", str(json.loads(lines[0])["arm"])]
        assert main(args) == 2
        assert dropped in capsys.readouterr().err

    @pytest.mark.parametrize("extra", [[], ["--arm", "7"], ["--arm", "1", "--weight", "ate"], ["--cate-at", "0,0", "--arm", "1"]])
    def test_input_errors(self, cli_inputs, extra):
        assert main(_analyze(cli_inputs, *extra)) == 2

    def test_bad_file(self, cli_inputs, tmp_path):
        assert main(["analyze", "--data", str(tmp_path / "nope.csv"), "--propensity", cli_inputs["propensity"],
                     "--predictions", cli_inputs["predictions"], "--arm", "1"]) == 2

    def test_estimation_error(self, cli_inputs):
        assert main(_analyze(cli_inputs, "--contrast", "1,2", "--cate-at", "40,40", "--kernel", "epanechnikov")) == 3

    def test_seed_from_environment(self, cli_inputs, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CALM_SEED", "17")
        out = tmp_path / "r.json"
        assert main(_analyze(cli_inputs, "--arm", "1", "--out", str(out))) == 0
        assert json.loads(out.read_text())["seed"] == 17 and "seed: 17" in capsys.readouterr().out

    def test_default_seed_printed(self, cli_inputs, monkeypatch, capsys):
        monkeypatch.delenv("CALM_SEED", raising=False)
        assert main(_analyze(cli_inputs, "--arm", "1")) == 0
        assert "seed: 0" in capsys.readouterr().out

    def test_config_file_and_flag_precedence(self, cli_inputs, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[calm]\nweight = robust\nalpha = 0.1\nfewshot-B = 7\n")
        out = tmp_path / "r.json"
        assert main(_analyze(cli_inputs, "--config", str(ini), "--arm", "1", "--alpha", "0.2", "--out", str(out))) == 0
        doc = json.loads(out.read_text())
        assert doc["weight"] == "robust" and doc["reports"][0]["alpha"] == 0.2 and doc["config"]["fewshot_B"] == 7

    def test_bad_config_value(self, cli_inputs, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[calm]\nweight = heavy\n")
        assert main(_analyze(cli_inputs, "--config", str(ini), "--arm", "1")) == 2


class TestAggregateAndFewShot:
    def test_round_trip(self, cli_inputs, tmp_path):
        pred = tmp_path / "fs.jsonl"
        assert main(["aggregate-predictions", *_files(cli_inputs), "--synthetic-dgp", "default",
                     "--fewshot-m", "5", "--fewshot-B", "3", "--seed", "2", "--out", str(pred)]) == 0
        ps = read_predictions(pred.read_text())
        assert ps.mode == "few_shot" and ps.B == 3 and ps.metadata["seed"] == 2
        out = tmp_path / "r.json"
        assert main(["analyze", *_files(cli_inputs), "--predictions", str(pred), "--arm", "1", "--seed", "2",
                     "--out", str(out)]) == 0
        rep = json.loads(out.read_text())["reports"][0]
        assert rep["config"]["estimator"] == "calm-fs" and rep["config"]["folds"] == 3

    def test_needs_one_source(self, cli_inputs):
        assert main(["aggregate-predictions", *_files(cli_inputs)]) == 2


class TestEfficiency:
    def test_prints_decision(self, cli_inputs, tmp_path, capsys):
        out = tmp_path / "e.json"
        assert main(["test-efficiency", *_files(cli_inputs), "--predictions", cli_inputs["predictions"],
                     "--n-sim", "1000", "--out", str(out)]) == 0
        text = capsys.readouterr().out
        for key in ("t_stat", "critical_value", "p_value", "decision"):
            assert key in text
        assert json.loads(out.read_text())["report"]["n_sim"] == 1000

    def test_bad_coordinate(self, cli_inputs):
        assert main(["test-efficiency", *_files(cli_inputs), "--predictions", cli_inputs["predictions"],
                     "--coordinate", "9"]) == 2


class TestSimulate:
    def test_outputs(self, tmp_path, capsys):
        prefix = tmp_path / "sim"
        assert main(["simulate", "--R", "3", "--n", "200", "--estimators", "aipw,calm-zero", "--seed", "5",
                     "--out", str(prefix)]) == 0
        lines = (tmp_path / "sim.csv").read_text().splitlines()
        header = json.loads(lines[0][2:])
        assert header["seed"] == 5 and header["config"]["R"] == 3 and header["dgp"]["n"] == 200
        assert len(lines) == 4
        doc = json.loads((tmp_path / "sim.json").read_text())
        assert [m["name"] for m in doc["metrics"]] == ["aipw", "calm-zero"]

    def test_unknown_estimator(self):
        assert main(["simulate", "--R", "2", "--n", "100", "--estimators", "ols"]) == 2

    def test_unknown_preset(self):
        assert main(["simulate", "--R", "2", "--dgp", "fancy"]) == 2


class TestPresets:
    def test_cate_preset_effect(self):
        d = dgp_preset("cate")
        x = np.linspace(-2, 2, 9)[:, None]
        assert np.allclose(d.cate(x), x[:, 0])

    def test_constant_mean_preset(self):
        d = dgp_preset("constant-mean")
        x = np.random.default_rng(0).standard_normal((5, 1))
        assert np.all(d.mean(x, 2) == 0.0) and d.theta[0] ** 2 + d.sigma_y**2 == pytest.approx(1.0)
