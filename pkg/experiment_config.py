"""
Training configuration: validated TrainConfig model, experiment presets and
config-file loading.

Precedence, lowest first: TrainConfig defaults, experiment preset, config file,
command-line overrides.
"""

import json
import logging
import os
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from dataio import SynthSpec
from dotenv_config import get_run_defaults
from rank_embedding_common import (
    BATCH_BALANCED,
    LOSS_RBL,
    ConfigError,
)

logger = logging.getLogger(__name__)


class SynthSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    coarse: int = Field(3, ge=1)
    fine_per_coarse: int = Field(4, ge=1)
    per_class: int = Field(60, ge=1)
    d_in: int = Field(128, ge=1)
    coarse_spread: float = Field(1.0, gt=0)
    fine_spread: float = Field(0.6, gt=0)
    noise: float = Field(1.3, gt=0)
    seed: Optional[int] = None

    def to_spec(self, default_seed: int) -> SynthSpec:
        return SynthSpec(
            coarse=self.coarse,
            fine_per_coarse=self.fine_per_coarse,
            per_class=self.per_class,
            d_in=self.d_in,
            coarse_spread=self.coarse_spread,
            fine_spread=self.fine_spread,
            noise=self.noise,
            seed=default_seed if self.seed is None else self.seed,
        )


class TrainConfig(BaseModel):
    """All hyperparameters and experiment switches of a training run."""
    model_config = ConfigDict(extra="forbid")

    experiment: Optional[str] = None
    loss: Literal["rbl", "quadruplet"] = LOSS_RBL
    batch_mode: Literal["balanced", "unconstrained"] = BATCH_BALANCED
    batch_size: int = Field(12, ge=2)
    d_out: int = Field(3, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rate: float = Field(1e-3, ge=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    margin_fine: float = Field(0.25, ge=0)
    margin_coarse: float = Field(0.5, ge=0)
    patience: int = Field(20, ge=1)
    max_epochs: int = Field(200, ge=0)
    seed: int = Field(default_factory=lambda: get_run_defaults()["seed"], ge=0)
    split_seed: Optional[int] = Field(None, ge=0)
    dataset: Optional[str] = None
    synth: Optional[SynthSettings] = None
    holdout_fine_per_coarse: int = Field(1, ge=0)
    label_height: Optional[int] = Field(None, ge=1)
    metric: Literal["cosine", "euclidean"] = "cosine"
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check_consistency(self) -> "TrainConfig":
        if not self.margin_coarse > self.margin_fine:
            raise ValueError(
                f"margin_coarse ({self.margin_coarse}) must be larger than margin_fine ({self.margin_fine})"
            )
        if self.dataset is not None and self.synth is not None:
            raise ValueError("set either 'dataset' or 'synth', not both")
        if self.dataset is None and self.synth is None:
            self.synth = SynthSettings()
        if self.output_dir is None:
            name = self.experiment or f"{self.loss}_{self.batch_mode}"
            self.output_dir = os.path.join(get_run_defaults()["output_root"], name)
        return self

    @property
    def effective_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed


class PresetCatalog:
    """Named experiment presets loaded from YAML"""

    def __init__(self, config_file: Optional[str] = None):
        if config_file is None:
            config_file = get_run_defaults()["presets_file"]
        try:
            with open(config_file, 'r') as f:
                self.config = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read preset file {config_file}: {e}") from e
        self.experiments = self.config.get('experiments', {})
        self.comparison_order = self.config.get('comparison_order', sorted(self.experiments))

    def names(self) -> List[str]:
        return list(self.experiments)

    def get_preset(self, name: str) -> Dict[str, Any]:
        if name not in self.experiments:
            raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(self.names())}")
        return dict(self.experiments[name] or {})


def load_config_file(path: str) -> Dict[str, Any]:
    """Read a JSON (or YAML) config file into a dictionary."""
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid JSON/YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain an object")
    return data


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_config(config_file: Optional[str] = None,
                   overrides: Optional[Dict[str, Any]] = None,
                   presets: Optional[PresetCatalog] = None) -> TrainConfig:
    """
    Build a TrainConfig from preset, config file and overrides.

    Args:
        config_file: Optional JSON/YAML config path
        overrides: Flag values; None entries are ignored
        presets: Preset catalog (loaded from RBL_PRESETS_FILE when omitted)

    Returns:
        Validated TrainConfig
    """
    file_values = load_config_file(config_file) if config_file else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    experiment = overrides.get("experiment") or file_values.get("experiment")
    values: Dict[str, Any] = {}
    if experiment:
        if presets is None:
            presets = PresetCatalog()
        values = _merge(values, presets.get_preset(experiment))
        values["experiment"] = experiment
    values = _merge(values, file_values)
    values = _merge(values, overrides)

    # A dataset given at a higher level replaces synthetic settings from below
    if "dataset" in overrides and "synth" not in overrides:
        values.pop("synth", None)

    try:
        config = TrainConfig(**values)
    except PydanticValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    logger.debug(f"Resolved configuration: {config.model_dump()}")
    return config


def save_config(config: TrainConfig, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
