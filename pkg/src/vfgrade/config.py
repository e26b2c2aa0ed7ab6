"""Run configuration: nested dataclass sections loaded from YAML.

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .network import EncoderSpec
from .objective import LossConfig, OptimizerConfig
from .preprocess import PreprocessConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    manifest: str = "manifest.yaml"
    test_fraction: float = 0.2
    split_seed: int | None = None


@dataclass
class SamplerConfig:
    n: int = 6


@dataclass
class NetworkConfig:
    width_scale: float = 1.0
    use_se: bool = True
    se_reduction: int = 16
    stem_stride: int = 2
    stem_pool: bool = True
    layers: tuple[int, ...] = (3, 4, 6, 3)


@dataclass
class TrainingConfig:
    epochs: int = 1000
    seed: int = 0
    checkpoint_every: int = 50
    # compress the optimizer milestones to ``epochs``
    compress_schedule: bool = True


@dataclass
class MetricsConfig:
    score_mode: str = "one_minus_g0"
    plot_roc: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    objective: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def encoder_spec(self) -> EncoderSpec:
        n = self.network
        return EncoderSpec(layers=tuple(n.layers), width_scale=n.width_scale,
                           input_side=self.augment.canonical_side, se_reduction=n.se_reduction,
                           use_se=n.use_se, stem_stride=n.stem_stride, stem_pool=n.stem_pool)

    def schedule(self) -> OptimizerConfig:
        if self.training.compress_schedule and self.training.epochs != self.optimizer.epochs:
            return self.optimizer.compressed(self.training.epochs)
        return self.optimizer

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {}, "config")

    @classmethod
    def desk(cls) -> "RunConfig":
        """CPU-scale preset: 32^3 views, quarter-width encoder, 50 epochs."""
        return cls.from_dict(DESK)


def _to_plain(x):
    if isinstance(x, dict):
        return {k: _to_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_plain(v) for v in x]
    return x


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def load_config(path) -> RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return RunConfig.from_dict(doc)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


DESK = {
    "augment": {
        "canonical_side": 32,
        # voxel-valued ranges scaled from the 128^3 canvas by 1/4
        "shift_limit": 3,
        "box_side_range": [1, 5],
    },
    "network": {"width_scale": 0.25, "stem_stride": 2, "stem_pool": False},
    # ~17 G0 training patches: n=6 gives 2 steps per epoch, n=2 gives 8
    "sampler": {"n": 2},
    "training": {"epochs": 50, "checkpoint_every": 10},
}
