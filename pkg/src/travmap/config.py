"""Structured pipeline configuration shared by every CLI command.

One YAML document holds paths, per-stage hyperparameters and a single
global seed; stage randomness derives from named sub-seeds so reruns of
any command with the same config are reproducible. Unknown keys are
rejected rather than ignored.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid pipeline configuration (bad key, type, or value)."""


# Named sub-seed offsets; each stage mixes (seed, offset, ...) so stages
# never share a stream even under the same global seed.
STAGE_OFFSETS = {
    "fourier": 0,       # must stay the raw seed: FourierConfig takes one int
    "routes": 13001,
    "split": 13003,
    "balance": 13005,
    "trials": 13007,
    "sim": 13009,
    "calibration": 13011,
}


def stage_seed(seed: int, name: str, *extra):
    if name == "fourier":
        return seed
    return (seed, STAGE_OFFSETS[name]) + tuple(int(x) for x in extra)


@dataclass(frozen=True)
class Paths:
    world_dir: str = "out/world"
    dataset_dir: str = "out/dataset"
    checkpoint: str = "out/model.json"
    reports_dir: str = "out/reports"


@dataclass(frozen=True)
class CollectSettings:
    routes: int = 24
    route_length: float = 36.0
    speed_min: float = 1.0
    speed_max: float = 2.0
    points_per_cell: int = 5
    ratios: tuple = (0.8, 0.1, 0.1)
    balance_ratio: float = None   # None disables subsampling

    def __post_init__(self):
        if self.routes < 1:
            raise ConfigError("collect.routes must be >= 1")
        if self.route_length <= 0:
            raise ConfigError("collect.route_length must be positive")
        if not 0 < self.speed_min <= self.speed_max:
            raise ConfigError("collect speeds must satisfy 0 < min <= max")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigError("collect.ratios must be three non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError("collect.ratios must sum to 1")
        if self.balance_ratio is not None:
            if not isinstance(self.balance_ratio, (int, float)) or self.balance_ratio <= 0:
                raise ConfigError("collect.balance_ratio must be positive or null")


@dataclass(frozen=True)
class ModelSettings:
    m: int = 8
    sigma_b: float = 1.0
    conv_channels: tuple = (16, 32, 64)
    mlp_hidden: int = 32
    hidden_size: int = 64
    seq_len: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    patience: int = 15
    use_omega: bool = True
    use_recurrent: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("model.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("model.batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("model.learning_rate must be positive")

    def model_config(self, seed: int, use_omega: bool = None,
                     use_recurrent: bool = None) -> ModelConfig:
        return ModelConfig(
            conv_channels=tuple(self.conv_channels),
            mlp_hidden=self.mlp_hidden,
            hidden_size=self.hidden_size,
            seq_len=self.seq_len,
            m=self.m,
            sigma_b=self.sigma_b,
            fourier_seed=stage_seed(seed, "fourier"),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            seed=seed,
            use_omega=self.use_omega if use_omega is None else use_omega,
            use_recurrent=self.use_recurrent if use_recurrent is None else use_recurrent,
        )


@dataclass(frozen=True)
class CostmapSettings:
    stride: float = 0.2
    untraversable_classes: tuple = (3, 4, 5)
    inference_v: float = 1.0
    inference_omega: float = 0.0

    def __post_init__(self):
        if self.stride <= 0:
            raise ConfigError("costmap.stride must be positive")


@dataclass(frozen=True)
class NavigationSettings:
    trials: int = 8
    speed: float = 1.0
    min_separation: float = 8.0
    clearance: float = 0.5
    planner_weight: float = 5.0
    obstacle_threshold: float = 0.05

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("navigation.trials must be >= 1")
        if self.speed <= 0:
            raise ConfigError("navigation.speed must be positive")
        if not 0 <= self.obstacle_threshold < 1:
            raise ConfigError("navigation.obstacle_threshold must be in [0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    collect: CollectSettings = field(default_factory=CollectSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    costmap: CostmapSettings = field(default_factory=CostmapSettings)
    navigation: NavigationSettings = field(default_factory=NavigationSettings)


_SECTIONS = {
    "paths": Paths,
    "collect": CollectSettings,
    "model": ModelSettings,
    "costmap": CostmapSettings,
    "navigation": NavigationSettings,
}


def _coerce(value, default, key):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key '{key}' must be a list")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' must be a string")
        return value
    return value


def _build_section(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{section}' must be a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        kwargs[key] = _coerce(value, getattr(defaults, key), f"{section}.{key}")
    return cls(**kwargs)


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    kwargs = {}
    for key, value in data.items():
        if key == "seed":
            kwargs["seed"] = _coerce(value, 0, "seed")
        elif key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return PipelineConfig(**kwargs)


def load_pipeline_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse config: {exc}")
    if data is None:
        data = {}
    return pipeline_config_from_dict(data)


def resolved_config_yaml(config: PipelineConfig) -> str:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(x) for x in obj]
        return obj
    return yaml.safe_dump(plain(config), sort_keys=True)


def write_resolved_config(config: PipelineConfig, path) -> None:
    """Record the fully resolved settings next to a command's outputs."""
    with open(path, "w") as fh:
        fh.write(resolved_config_yaml(config))
