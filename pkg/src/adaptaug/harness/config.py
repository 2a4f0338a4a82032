"""Experiment configuration: nested dataclasses with YAML round-trip.

Precedence: built-in defaults < config file < command-line overrides.  The
fully resolved config is written into every run directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..bilevel import AugmentationOptions, BilevelConfig
from ..curriculum import CurriculumSchedule
from ..errors import ConfigurationError


@dataclass
class DatasetConfig:
    name: str = "shapes10"
    size: int = 6500
    generation_seed: int = 0
    n_train: int = 2000
    n_val: int = 500
    n_test: Optional[int] = 2000
    stratify: bool = True
    split_seed: int = 0
    cifar_root: Optional[str] = None


@dataclass
class ModelConfig:
    architecture: str = "small_cnn"
    width: int = 16          # conv width (small_cnn / wide_resnet_tiny)
    hidden: int = 64         # mlp hidden width


@dataclass
class PolicyConfig:
    hidden_layers: int = 0
    hidden_dim: int = 64


@dataclass
class CurriculumConfig:
    tau: float = 40.0
    mode: str = "tanh"

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(tau=self.tau, mode=self.mode)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    bilevel: BilevelConfig = field(default_factory=BilevelConfig)
    aug: AugmentationOptions = field(default_factory=AugmentationOptions)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    ops: Optional[list[str]] = None       # None = full default registry
    registry_file: Optional[str] = None   # overrides `ops` when set
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/experiment"
    checkpoint_every: int = 0
    tag: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        sections = {
            "dataset": DatasetConfig,
            "model": ModelConfig,
            "policy": PolicyConfig,
            "bilevel": BilevelConfig,
            "aug": AugmentationOptions,
            "curriculum": CurriculumConfig,
        }
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigurationError(f"config section {key!r} must be a mapping")
                sec_known = {f.name for f in dataclasses.fields(sections[key])}
                sec_unknown = set(value) - sec_known
                if sec_unknown:
                    raise ConfigurationError(
                        f"unknown keys in config section {key!r}: {sorted(sec_unknown)}"
                    )
                kwargs[key] = sections[key](**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        return cls.from_dict(raw or {})

    def replaced(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. replaced(**{"aug.delta": 0.1})."""
        raw = self.to_dict()
        for key, value in dotted.items():
            _set_dotted(raw, key, value)
        return ExperimentConfig.from_dict(raw)


def _set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"unknown config path {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def apply_overrides(config: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply KEY=VALUE strings (dotted keys, YAML-parsed values)."""
    overrides = {}
    for item in assignments:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not KEY=VALUE")
        key, _, text = item.partition("=")
        overrides[key.strip()] = yaml.safe_load(text)
    return config.replaced(**overrides)
