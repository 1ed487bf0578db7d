"""Run configuration: one YAML file with sections mirroring the module
configs. Precedence is fixed: CLI flags override the file, the file
overrides defaults; the DINP_CONFIG environment variable supplies the file
path when no --config flag is given. Unknown sections or keys are
rejected, and every value passes the owning dataclass's validation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .diffusion import SamplerConfig, make_schedule
from .errors import ConfigError, ValidationError
from .phantom import PhantomSpec
from .roi import ScenarioPolicy
from .training import TrainConfig
from .unet import UNetConfig

ENV_VAR = "DINP_CONFIG"


@dataclass
class DatasetParams:
    studies: int = 200
    slices_per_study: int = 38
    min_bbox_area: int = 100
    bbox_threshold: float = 0.05
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def __post_init__(self) -> None:
        if self.studies < 1 or self.slices_per_study < 1:
            raise ValidationError("dataset needs at least one study and one slice")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValidationError(f"split ratios must sum to 1, got {self.ratios}")


@dataclass
class ScheduleParams:
    kind: str = "cosine"
    steps: int = 200

    def __post_init__(self) -> None:
        make_schedule(self.kind, self.steps)  # validates kind and range


@dataclass
class ServiceConfig:
    queue_depth: int = 8
    workers: int = 1

    def __post_init__(self) -> None:
        if self.queue_depth < 1 or self.workers < 1:
            raise ValidationError("queue_depth and workers must be >= 1")


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    dataset: DatasetParams = field(default_factory=DatasetParams)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: ScenarioPolicy = field(default_factory=ScenarioPolicy)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)


_SECTIONS = {
    "phantom": PhantomSpec,
    "dataset": DatasetParams,
    "schedule": ScheduleParams,
    "unet": UNetConfig,
    "train": TrainConfig,
    "policy": ScenarioPolicy,
    "sampler": SamplerConfig,
    "service": ServiceConfig,
}

_TUPLE_KEYS = {"channel_mults", "attention_levels", "ratios", "radius_range"}


def _build_section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {name!r}")
    coerced = {
        k: tuple(v) if k in _TUPLE_KEYS and isinstance(v, list) else v
        for k, v in values.items()
    }
    try:
        return cls(**coerced)
    except ValidationError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def load_run_config(path: Optional[str] = None) -> RunConfig:
    """Build the run configuration from an optional YAML file."""
    if path is None:
        path = os.environ.get(ENV_VAR)
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML ({exc})") from exc
    if raw is None:
        return RunConfig()
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping of sections")
    kwargs = {}
    for section, values in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} (known: {sorted(_SECTIONS)})")
        kwargs[section] = _build_section(section, _SECTIONS[section], values)
    return RunConfig(**kwargs)
