"""Flat key-value configuration documents (YAML or JSON) mapped onto the config dataclasses."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .evaluation import EvalConfig
from .geometry import HomographyParams
from .losses import LossWeights
from .model import ModelConfig
from .siamese import PhotometricParams
from .training import TrainConfig

CONFIG_ENV_VAR = "UNSUPERPOINT_CONFIG"
COMMANDS = ("train", "detect", "evaluate", "diagnose", "export")

# flat key -> (section, field)
_RENAMED = {"eval_resolution": ("eval", "resolution")}


def _keys(cls, section, skip=()):
    return {f.name: (section, f.name) for f in fields(cls) if f.name not in skip}


KEY_MAP = {
    **_keys(EvalConfig, "eval", skip=("resolution", "seed")),
    **_keys(ModelConfig, "model"),
    **_keys(LossWeights, "weights"),
    **_keys(HomographyParams, "homography"),
    **_keys(PhotometricParams, "photometric"),
    **_keys(TrainConfig, "train", skip=("homography", "photometric")),
    **_RENAMED,
}


@dataclass
class AppConfig:
    command: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    verbosity: int = 0

    @property
    def seed(self) -> int:
        return self.train.seed


def _coerce(value):
    return tuple(value) if isinstance(value, list) else value


def build_config(values: dict | None = None, command: str | None = None) -> AppConfig:
    """Apply a flat mapping of overrides on top of the built-in defaults."""
    sections: dict[str, dict] = {s: {} for s in ("train", "eval", "model", "weights", "homography", "photometric")}
    for key, value in (values or {}).items():
        if key not in KEY_MAP:
            raise KeyError(f"unknown configuration key {key!r}")
        section, name = KEY_MAP[key]
        sections[section][name] = _coerce(value)
    if "seed" in sections["train"]:
        sections["eval"]["seed"] = sections["train"]["seed"]
    train = TrainConfig(**sections["train"])
    train = replace(train, homography=replace(train.homography, **sections["homography"]),
                    photometric=replace(train.photometric, **sections["photometric"]))
    if command is not None and command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    return AppConfig(command=command, train=train, eval=EvalConfig(**sections["eval"]),
                     model=ModelConfig(**sections["model"]), weights=LossWeights(**sections["weights"]))


def read_config_file(path) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: configuration must be a flat key-value mapping")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ValueError(f"{path}: nested value for {k!r}; configuration must be flat")
    return data


def load_config(path=None, overrides: dict | None = None, command: str | None = None) -> AppConfig:
    """Defaults < config file (``path`` or $UNSUPERPOINT_CONFIG) < ``overrides``."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values, command)
