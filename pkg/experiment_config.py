"""
Experiment configuration loading.

A config file is JSON with optional nested sections:

    {
      "environment": {"kind": "synthetic-news", "synthetic": {"n_arms": 5}},
      "policies": ["kernel-ucb-pool", "kmtl-ucb"],
      "horizon": 1000, "runs": 10, "seed": 0,
      "policy": {"lam": 1.0, "delta": 0.05, "c": 1.0, "weighted": true},
      "kernels": {"context_bandwidth": "auto", "strategy": "median"}
    }

Section keys are flattened onto ExperimentConfig; command-line overrides are
applied last.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError

from bandit_policies import is_known_policy
from environments import DATASET_SHAPES
from errors import ConfigurationError
from models import ExperimentConfig

logger = logging.getLogger(__name__)

WORKERS_ENV_VAR = "KMTL_WORKERS"

_SECTION_KEYS = {
    "policy": {
        "lam": "lam", "beta": "beta", "delta": "delta", "c": "c", "weighted": "weighted",
        "mu": "mu", "estimate_period": "estimate_period", "incremental": "incremental",
    },
    "kernels": {
        "context_bandwidth": "context_bandwidth", "embedding_bandwidth": "embedding_bandwidth",
        "task_bandwidth": "task_bandwidth", "strategy": "bandwidth_strategy",
    },
}

# CLI flag name -> ExperimentConfig field
_OVERRIDE_KEYS = {
    "T": "horizon", "runs": "runs", "seed": "seed", "lambda": "lam",
    "beta": "beta", "out": "output_dir", "workers": "workers",
}


def flatten_sections(data: Dict[str, Any]) -> Dict[str, Any]:
    """Move keys from the ``policy`` / ``kernels`` sections to the top level."""
    flat = dict(data)
    for section, keys in _SECTION_KEYS.items():
        values = flat.pop(section, None) or {}
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section '{section}' must be an object")
        for key, value in values.items():
            if key not in keys:
                raise ConfigurationError(f"unknown key '{key}' in config section '{section}'")
            flat[keys[key]] = value
    return flat


def environment_from_flag(value: str) -> Dict[str, Any]:
    """``--env`` accepts synthetic-news, multiclass:<dataset> or a known dataset name."""
    if value in ("synthetic-news", "synthetic"):
        return {"kind": "synthetic-news"}
    dataset = value.split(":", 1)[1] if value.startswith("multiclass:") else value
    if dataset not in DATASET_SHAPES:
        raise ConfigurationError(f"unknown environment '{value}'")
    return {"kind": "multiclass", "dataset": dataset}


def validate_policies(config: ExperimentConfig) -> ExperimentConfig:
    unknown = [name for name in config.policies if not is_known_policy(name)]
    if unknown:
        raise ConfigurationError(f"unknown policies: {', '.join(unknown)}")
    if len(set(config.policies)) != len(config.policies):
        raise ConfigurationError("policy list contains duplicates")
    return config


def build_config(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Validate raw config data plus overrides into an ExperimentConfig."""
    merged = flatten_sections(data)
    if "workers" not in merged and os.getenv(WORKERS_ENV_VAR):
        merged["workers"] = os.getenv(WORKERS_ENV_VAR)

    for flag, value in (overrides or {}).items():
        if value is None:
            continue
        if flag == "env":
            merged["environment"] = environment_from_flag(value)
        elif flag == "policy":
            merged["policies"] = [p.strip() for p in value.split(",") if p.strip()]
        elif flag in _OVERRIDE_KEYS:
            merged[_OVERRIDE_KEYS[flag]] = value
        else:
            raise ConfigurationError(f"unknown override '{flag}'")

    try:
        config = ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid experiment config: {exc}") from exc
    return validate_policies(config)


class ExperimentConfigFile:
    """
    Loads and saves an experiment config file.
    A missing path yields the defaults.
    """

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = Path(config_file) if config_file else None

    def read(self) -> Dict[str, Any]:
        if self.config_file is None:
            return {}
        if not self.config_file.exists():
            raise ConfigurationError(f"config file not found: {self.config_file}")
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{self.config_file}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{self.config_file}: top level must be an object")
        return data

    def load(self, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
        config = build_config(self.read(), overrides)
        logger.info(
            "Loaded experiment config",
            extra={"file": str(self.config_file) if self.config_file else "defaults",
                   "policies": ",".join(config.policies), "horizon": config.horizon, "runs": config.runs}
        )
        return config

    def save(self, config: ExperimentConfig, path: Optional[str] = None) -> Path:
        target = Path(path) if path else self.config_file
        if target is None:
            raise ConfigurationError("no path to save the config to")
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8", newline="\n") as f:
            json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info(f"Configuration saved to {target}")
        return target
