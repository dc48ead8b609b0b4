"""Tests for configuration loading and validation."""

import os
from pathlib import Path
from unittest.mock import patch

import pytest

from cfpoison.config import (
    build_experiment_config,
    classifier_hyperparameters,
    deep_merge,
    get_default_config_path,
    load_config_document,
    load_defaults,
    recourse_settings,
    resolve_seed,
    wdn_settings,
)
from cfpoison.models import ConfigError, CostSpec, ExperimentConfig


class TestDefaults:
    """Tests for the bundled defaults."""

    def test_sections(self):
        assert {"classifiers", "recourse", "experiment", "wdn"} <= set(load_defaults())

    def test_fresh_copy(self):
        """Mutating one copy does not leak into the next."""
        load_defaults()["recourse"]["step"] = 99
        assert load_defaults()["recourse"]["step"] == 0.05

    def test_defaults_build(self):
        """An empty document is a valid experiment."""
        cfg = build_experiment_config({})
        assert isinstance(cfg, ExperimentConfig)
        assert cfg.classifier.kind == "linear_svm"
        assert cfg.budgets == (0.05,)
        assert cfg.poison_mode == "counterfactual"


class TestConfigPath:
    """Tests for default config path resolution."""

    def test_default(self):
        with patch.dict(os.environ, {}, clear=True):
            assert get_default_config_path() == Path("cfpoison.yaml")

    def test_env_override(self):
        with patch.dict(os.environ, {"CFPOISON_CONFIG": "/tmp/exp.yaml"}):
            assert get_default_config_path() == Path("/tmp/exp.yaml")


class TestLoadDocument:
    """Tests for load_config_document."""

    def test_yaml(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("folds: 3\nclassifier:\n  kind: knn\n")
        doc, resolved = load_config_document(path)
        assert doc == {"folds": 3, "classifier": {"kind": "knn"}}
        assert resolved == path

    def test_json(self, tmp_path):
        """JSON is read by the same parser."""
        path = tmp_path / "exp.json"
        path.write_text('{"folds": 4}')
        assert load_config_document(path)[0] == {"folds": 4}

    def test_missing(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config_document(tmp_path / "nope.yaml")

    def test_unparseable(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("folds: [3\n")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config_document(path)

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config_document(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config_document(path)[0] == {}


class TestDeepMerge:
    """Tests for deep_merge."""

    def test_nested(self):
        merged = deep_merge({"a": {"b": 1, "c": 2}, "d": 1}, {"a": {"b": 5}})
        assert merged == {"a": {"b": 5, "c": 2}, "d": 1}

    def test_base_untouched(self):
        base = {"a": {"b": 1}}
        deep_merge(base, {"a": {"b": 2}})
        assert base == {"a": {"b": 1}}

    def test_lists_replace(self):
        assert deep_merge({"x": [1, 2]}, {"x": [3]}) == {"x": [3]}


class TestBuildExperimentConfig:
    """Tests for build_experiment_config."""

    def test_overrides_merge_with_defaults(self):
        cfg = build_experiment_config({"poison": {"k": 5}, "budgets": [0.1, 0.2]})
        assert cfg.poison.k == 5
        assert cfg.poison.b == 1.5
        assert cfg.budgets == (0.1, 0.2)

    def test_experiment_wrapper(self):
        assert build_experiment_config({"experiment": {"folds": 3}}).folds == 3

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigError, match="poison.q"):
            build_experiment_config({"poison": {"q": 1}})

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="'colour'"):
            build_experiment_config({"colour": "red"})

    def test_unknown_hyperparameter(self):
        with pytest.raises(ConfigError, match="classifier.hyperparameters.depth"):
            build_experiment_config({"classifier": {"kind": "mlp", "hyperparameters": {"depth": 3}}})

    def test_invalid_value(self):
        """Section validation errors are prefixed with the section."""
        with pytest.raises(ConfigError, match="cost"):
            build_experiment_config({"cost": {"p": 3}})

    def test_budget_range(self):
        with pytest.raises(ConfigError):
            build_experiment_config({"budgets": [1.5]})

    def test_budgets_must_be_list(self):
        with pytest.raises(ConfigError, match="list"):
            build_experiment_config({"budgets": 0.1})

    def test_weights_become_tuple(self):
        cfg = build_experiment_config({"cost": {"weights": [1, 2, 3, 4, 5]}})
        assert cfg.cost == CostSpec(p=2, weights=(1.0, 2.0, 3.0, 4.0, 5.0))

    def test_seed_argument_wins(self):
        assert build_experiment_config({"seed": 4}, seed=9).seed == 9

    def test_unknown_defense(self):
        with pytest.raises(ConfigError, match="unknown defense"):
            build_experiment_config({"defenses": ["firewall"]})


class TestSections:
    """Tests for section helpers."""

    def test_classifier_hyperparameters(self):
        hp = classifier_hyperparameters("random_forest", {"trees": 7})
        assert hp["trees"] == 7
        assert hp["max_depth"] == 8

    def test_recourse_settings(self):
        settings = recourse_settings({"budget": 100})
        assert settings.budget == 100
        assert settings.step == 0.05

    def test_recourse_unknown_key(self):
        with pytest.raises(ConfigError, match="recourse.temperature"):
            recourse_settings({"temperature": 1})

    def test_wdn_settings(self):
        assert wdn_settings({"sensors": 6})["sensors"] == 6
        assert wdn_settings()["max_support"] == 4


class TestResolveSeed:
    """Tests for seed precedence."""

    def test_flag_first(self):
        with patch.dict(os.environ, {"CFPOISON_SEED": "5"}):
            assert resolve_seed(1, 2) == (1, "flag")

    def test_config_second(self):
        with patch.dict(os.environ, {"CFPOISON_SEED": "5"}):
            assert resolve_seed(None, 2) == (2, "config")

    def test_env_third(self):
        with patch.dict(os.environ, {"CFPOISON_SEED": "5"}):
            assert resolve_seed() == (5, "env")

    def test_default(self):
        with patch.dict(os.environ, {}, clear=True):
            assert resolve_seed() == (0, "default")

    def test_bad_env(self):
        with patch.dict(os.environ, {"CFPOISON_SEED": "abc"}):
            with pytest.raises(ConfigError, match="CFPOISON_SEED"):
                resolve_seed()
