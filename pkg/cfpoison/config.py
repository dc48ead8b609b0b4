"""Configuration file handling for cfpoison."""

import copy
import dataclasses
import os
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .models import (
    ClassifierSpec,
    ConfigError,
    CostSpec,
    DatasetSource,
    DefenseSpec,
    ExperimentConfig,
    PoisonConfig,
    RecourseSettings,
    TargetSpec,
)

CONFIG_ENV = "CFPOISON_CONFIG"
SEED_ENV = "CFPOISON_SEED"

# Nested sections of an experiment document and the dataclass each one builds
_SECTIONS = {
    "dataset": DatasetSource,
    "classifier": ClassifierSpec,
    "cost": CostSpec,
    "target": TargetSpec,
    "poison": PoisonConfig,
    "defense": DefenseSpec,
    "recourse": RecourseSettings,
}
_TUPLE_FIELDS = {("cost", "weights"), ("", "budgets"), ("", "defenses")}


@lru_cache(maxsize=1)
def _bundled_defaults() -> dict:
    defaults_file = resources.files("cfpoison").joinpath("defaults.yaml")
    with resources.as_file(defaults_file) as path:
        with open(path) as f:
            return yaml.safe_load(f) or {}


def load_defaults() -> dict:
    """Load the bundled defaults.yaml (a fresh copy on every call)"""
    return copy.deepcopy(_bundled_defaults())


def get_default_config_path() -> Path:
    """Get the default experiment config path"""
    env_path = os.environ.get(CONFIG_ENV)
    if env_path:
        return Path(env_path).expanduser()
    return Path("cfpoison.yaml")


def load_config_document(path: Optional[Path] = None) -> tuple[dict, Path]:
    """
    Read a YAML or JSON experiment document.

    Returns:
        (document, path)
    """
    path = Path(path).expanduser() if path else get_default_config_path()
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {' '.join(str(e).split())}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc, path


def deep_merge(base: dict, override: dict) -> dict:
    """Recursively merge ``override`` into a copy of ``base``"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _check_keys(section: dict, cls: type, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown key '{path}{unknown[0]}'")


def _build(cls: type, section: Any, path: str):
    if not isinstance(section, dict):
        raise ConfigError(f"'{path.rstrip('.')}' must be a mapping")
    _check_keys(section, cls, path)
    values = dict(section)
    for section_name, field_name in _TUPLE_FIELDS:
        if f"{section_name}." == path and values.get(field_name) is not None:
            values[field_name] = tuple(values[field_name])
    try:
        return cls(**values)
    except ConfigError as e:
        raise ConfigError(f"{path.rstrip('.')}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path.rstrip('.')}: {e}") from e


def classifier_hyperparameters(kind: str, overrides: Optional[dict] = None) -> dict:
    """Bundled hyperparameters of a classifier kind with overrides applied"""
    defaults = load_defaults().get("classifiers", {})
    if kind not in defaults:
        raise ConfigError(f"unknown classifier kind '{kind}'")
    base = defaults[kind]
    overrides = overrides or {}
    unknown = sorted(set(overrides) - set(base))
    if unknown:
        raise ConfigError(f"unknown key 'classifier.hyperparameters.{unknown[0]}' for {kind}")
    return {**base, **overrides}


def recourse_settings(overrides: Optional[dict] = None) -> RecourseSettings:
    merged = deep_merge(load_defaults().get("recourse", {}), overrides or {})
    return _build(RecourseSettings, merged, "recourse.")


def build_experiment_config(doc: dict, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Validate an experiment document and build an ExperimentConfig.

    The document is deep-merged over the bundled experiment defaults; a top-level
    ``experiment:`` key is accepted as a wrapper. Unknown keys raise ConfigError naming
    the key path.
    """
    if "experiment" in doc and isinstance(doc["experiment"], dict):
        doc = doc["experiment"]
    defaults = load_defaults()
    merged = deep_merge(defaults.get("experiment", {}), doc)
    merged["recourse"] = deep_merge(defaults.get("recourse", {}), merged.get("recourse") or {})

    _check_keys(merged, ExperimentConfig, "")
    values = {}
    for key, value in merged.items():
        if key in _SECTIONS:
            values[key] = _build(_SECTIONS[key], value, f"{key}.")
        elif key in ("budgets", "defenses"):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"'{key}' must be a list")
            values[key] = tuple(value)
        else:
            values[key] = value

    # unknown hyperparameters fail early, before any work is done
    classifier = values["classifier"]
    classifier_hyperparameters(classifier.kind, classifier.hyperparameters)

    if seed is not None:
        values["seed"] = seed
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def resolve_seed(flag: Optional[int] = None, config_seed: Optional[int] = None) -> tuple[int, str]:
    """
    Resolve the global seed.

    Precedence: command-line flag > config document > CFPOISON_SEED > 0.

    Returns:
        (seed, source) with source one of flag, config, env, default
    """
    if flag is not None:
        return int(flag), "flag"
    if config_seed is not None:
        return int(config_seed), "config"
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            return int(env_seed), "env"
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer, got '{env_seed}'") from e
    return 0, "default"


def wdn_settings(overrides: Optional[dict] = None) -> dict:
    """Bundled case-study settings with overrides applied"""
    base = load_defaults().get("wdn", {})
    overrides = overrides or {}
    unknown = sorted(set(overrides) - set(base))
    if unknown:
        raise ConfigError(f"unknown key 'wdn.{unknown[0]}'")
    return {**base, **overrides}
