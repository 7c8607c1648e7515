"""Run configuration: nested dataclasses, stored on disk as flat dotted-key JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .diffusion import ConfigError, make_schedule
from .networks import DiscriminatorConfig, GeneratorConfig
from .training import TrainConfig

__all__ = ["DataConfig", "DiffusionConfig", "RunConfig", "parse_override"]


@dataclass
class DataConfig:
    root: str = "data"
    seed: int = 0
    split_ratios: list[float] = field(default_factory=lambda: [0.9, 0.1])
    hr_size: int = 128
    scale_factor: int = 8


@dataclass
class DiffusionConfig:
    T: int = 2
    beta_min: float = 0.1
    beta_max: float = 20.0

    def schedule(self):
        return make_schedule(self.T, self.beta_min, self.beta_max)


_SECTIONS = {
    "gen": GeneratorConfig,
    "disc": DiscriminatorConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "diffusion": DiffusionConfig,
}


@dataclass
class RunConfig:
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    output_dir: str = "runs/default"
    checkpoint_interval: int = 1000
    seed: int = 0

    def to_flat(self) -> dict:
        flat = {}
        for name in _SECTIONS:
            for k, v in asdict(getattr(self, name)).items():
                flat[f"{name}.{k}"] = list(v) if isinstance(v, tuple) else v
        flat["output_dir"] = self.output_dir
        flat["checkpoint_interval"] = self.checkpoint_interval
        flat["seed"] = self.seed
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        sections = {name: {} for name in _SECTIONS}
        top = {}
        for key, value in flat.items():
            head, _, rest = key.partition(".")
            if rest:
                if head not in sections:
                    raise ConfigError(f"unknown config section in key {key!r}")
                known = {f.name for f in fields(_SECTIONS[head])}
                if rest not in known:
                    raise ConfigError(f"unknown config key {key!r}")
                sections[head][rest] = value
            elif key in ("output_dir", "checkpoint_interval", "seed"):
                top[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            built = {name: _SECTIONS[name](**kw) for name, kw in sections.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(**built, **top)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.diffusion.schedule()
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        f = self.gen.downsample_factor
        packet = self.data.hr_size // 2
        if self.data.hr_size % (2 * self.data.scale_factor) or packet % f:
            raise ConfigError(
                f"hr_size={self.data.hr_size} incompatible with scale_factor="
                f"{self.data.scale_factor} and a U-Net downsampling factor of {f}")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        flat = self.to_flat()
        flat.update(overrides)
        return RunConfig.from_flat(flat)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_flat(json.loads(Path(path).read_text()))


def parse_override(text: str) -> tuple[str, object]:
    """``key=value``; the value is parsed as JSON when possible, else kept as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
