"""Tests for subcommand dispatch, exit codes and run manifests."""

import json
import os
from unittest.mock import patch

import pytest
import yaml

from cfpoison.cli import MANIFEST_NAME, _invoke, dispatch, execute
from cfpoison.models import CliInvocation, RetrainError
from cfpoison.utils import sha256_file

SMALL_EXPERIMENT = {
    "dataset": {"n": 80, "d": 2},
    "classifier": {"kind": "linear_svm", "hyperparameters": {"epochs": 100}},
    "cf_method": "nun",
    "budgets": [0.1],
    "folds": 2,
    "seed": 3,
}


def write_config(tmp_path, doc=None, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(SMALL_EXPERIMENT if doc is None else doc))
    return str(path)


def run(subcommand, config, out, **overrides):
    return dispatch(CliInvocation(subcommand, config, str(out), overrides))


def manifest(out):
    return json.loads((out / MANIFEST_NAME).read_text())


class TestExitCodes:
    """Tests for exit codes and error reporting."""

    def test_unknown_subcommand(self, tmp_path, capsys):
        assert run("dance", None, tmp_path / "out") == 1
        assert "error[validation]: unknown subcommand 'dance'" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        config = write_config(tmp_path, {**SMALL_EXPERIMENT, "colour": "red"})
        out = tmp_path / "out"
        assert run("train", config, out) == 1
        doc = manifest(out)
        assert doc["status"] == "error"
        assert doc["exit_code"] == 1
        assert doc["error"]["kind"] == "validation"
        assert "colour" in doc["error"]["message"]
        err_lines = capsys.readouterr().err.splitlines()
        assert sum(line.startswith("error[") for line in err_lines) == 1

    def test_missing_config(self, tmp_path):
        assert run("train", str(tmp_path / "missing.yaml"), tmp_path / "out") == 1

    def test_bad_budget_flag(self, tmp_path):
        assert run("evaluate", write_config(tmp_path), tmp_path / "out", budgets="0.1,lots") == 1

    def test_bad_format(self, tmp_path):
        assert run("evaluate", write_config(tmp_path), tmp_path / "out", formats="pdf") == 1

    def test_runtime_failure(self, tmp_path):
        """Failures after validation exit with 2."""
        out = tmp_path / "out"
        with patch("cfpoison.cli.run_experiment", side_effect=RetrainError("singular system")):
            assert run("evaluate", write_config(tmp_path), out) == 2
        assert manifest(out)["error"] == {"kind": "runtime", "message": "singular system"}

    def test_invoke_exits(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            _invoke("train", str(tmp_path / "missing.yaml"), str(tmp_path / "out"), False)
        assert exc.value.code == 1


class TestManifest:
    """Tests for manifest.json."""

    def test_lists_outputs_with_hashes(self, tmp_path):
        out = tmp_path / "out"
        assert run("train", write_config(tmp_path), out) == 0
        doc = manifest(out)
        assert doc["status"] == "ok"
        assert doc["subcommand"] == "train"
        assert doc["seed"] == 3 and doc["seed_source"] == "config"
        assert doc["config"]["folds"] == 2
        files = {f["path"]: f for f in doc["files"]}
        assert set(files) == {"model.json", "train.json"}
        assert files["model.json"]["sha256"] == sha256_file(out / "model.json")

    def test_seed_flag_wins(self, tmp_path):
        out = tmp_path / "out"
        run("train", write_config(tmp_path), out, seed=8)
        doc = manifest(out)
        assert (doc["seed"], doc["seed_source"]) == (8, "flag")

    def test_seed_from_env(self, tmp_path):
        config = write_config(tmp_path, {k: v for k, v in SMALL_EXPERIMENT.items() if k != "seed"})
        out = tmp_path / "out"
        with patch.dict(os.environ, {"CFPOISON_SEED": "12"}):
            run("train", config, out)
        doc = manifest(out)
        assert (doc["seed"], doc["seed_source"]) == (12, "env")

    def test_config_from_env_path(self, tmp_path):
        """Without --config the CFPOISON_CONFIG path is used."""
        config = write_config(tmp_path)
        with patch.dict(os.environ, {"CFPOISON_CONFIG": config}):
            assert run("train", None, tmp_path / "out") == 0

    def test_timing_is_volatile(self, tmp_path):
        out = tmp_path / "out"
        assert run("evaluate", write_config(tmp_path), out, workers=1, formats="json") == 0
        volatile = {f["path"]: f["volatile"] for f in manifest(out)["files"]}
        assert volatile == {"report.json": False, "report.timing.json": True}


class TestSubcommands:
    """Tests for each subcommand's outputs."""

    def test_train(self, tmp_path):
        out = tmp_path / "out"
        result = execute(CliInvocation("train", write_config(tmp_path), str(out)))
        assert result.success
        summary = json.loads((out / "train.json").read_text())
        assert summary["kind"] == "linear_svm"
        assert summary["train_size"] + summary["test_size"] == 80
        assert 0.0 <= summary["accuracy"] <= 1.0

    def test_explain(self, tmp_path):
        out = tmp_path / "out"
        assert run("explain", write_config(tmp_path), out) == 0
        lines = (out / "counterfactuals.jsonl").read_text().splitlines()
        assert lines
        assert all(json.loads(line)["generator"] == "nun" for line in lines)

    def test_poison_then_defend(self, tmp_path):
        """A saved poison set can be screened by a later run."""
        config = write_config(tmp_path, {**SMALL_EXPERIMENT, "defenses": ["l2_defense", "knn_defense"]})
        out = tmp_path / "out"
        assert run("poison", config, out, poison_out="p.json") == 0
        poison = json.loads((out / "p.json").read_text())
        assert 0 < len(poison["instances"]) <= 4
        assert {i["y"] for i in poison["instances"]} == {0}

        assert run("defend", config, out, poison_in=str(out / "p.json")) == 0
        for method in ("l2_defense", "knn_defense"):
            assert (out / f"detection_{method}.json").exists()

    def test_poison_requires_counterfactual_mode(self, tmp_path):
        config = write_config(tmp_path, {**SMALL_EXPERIMENT, "poison_mode": "label_flip"})
        assert run("poison", config, tmp_path / "out") == 1

    def test_defend_missing_poison(self, tmp_path):
        assert run("defend", write_config(tmp_path), tmp_path / "out", poison_in=str(tmp_path / "nope.json")) == 1

    def test_flip(self, tmp_path):
        out = tmp_path / "out"
        assert run("flip", write_config(tmp_path), out) == 0
        lines = (out / "flipped.csv").read_text().splitlines()
        assert lines[0] == "x0,x1,label,sensitive,flipped"
        assert sum(int(line.rsplit(",", 1)[1]) for line in lines[1:]) == 4

    def test_evaluate_and_report(self, tmp_path):
        """The report subcommand re-emits CSV from an evaluation report."""
        out = tmp_path / "out"
        assert run("evaluate", write_config(tmp_path), out, workers=1, formats="json,csv") == 0
        assert (out / "report.csv").exists()
        again = tmp_path / "again"
        assert run("report", None, again, input=str(out / "report.json"), formats="csv") == 0
        assert (again / "report.csv").read_text() == (out / "report.csv").read_text()
        assert manifest(again)["seed_source"] == "report"

    def test_report_needs_input(self, tmp_path):
        assert run("report", None, tmp_path / "out") == 1

    def test_evaluate_budget_flag(self, tmp_path):
        out = tmp_path / "out"
        assert run("evaluate", write_config(tmp_path), out, budgets="0,0.1", workers=1, formats="json") == 0
        report = json.loads((out / "report.json").read_text())
        assert sorted({r["budget"] for r in report["records"]}) == [0.0, 0.1]

    def test_ablation(self, tmp_path):
        out = tmp_path / "out"
        assert run("ablation", write_config(tmp_path), out, workers=1, formats="json") == 0
        assert (out / "ablation_uniform.json").exists()
        assert (out / "ablation_boundary_weighted.json").exists()

    def test_wdn_demo(self, tmp_path):
        config = write_config(tmp_path, {"wdn": {"steps": 300, "fault_length": 40}}, name="wdn.yaml")
        out = tmp_path / "out"
        assert run("wdn-demo", config, out, seed=2, formats="json") == 0
        for name in ("wdn_report.json", "wdn_alarms.json", "wdn_poison.json", "scenario_train_0.csv"):
            assert (out / name).exists()
        faults = json.loads((out / "scenario_evaluation_0.faults.json").read_text())
        assert len(faults["faults"]) == 1
        assert not (out / "wdn_sparsity.svg").exists()
