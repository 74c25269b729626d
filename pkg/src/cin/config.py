"""Flat run configuration shared by every CLI command.

A JSON config file uses exactly the field names of :class:`RunConfig`;
command-line overrides are applied on top and the result is validated before
anything runs.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Tuple

from .backbone import BackboneConfig
from .data import SyntheticTaskConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import VARIANTS, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # synthetic data
    num_superclasses: int = 2
    subclasses_per_superclass: int = 4
    image_size: int = 32
    glyph_size: int = 5
    noise_std: float = 0.05
    texture_amplitude: float = 0.1
    train_per_class: int = 100
    val_per_class: int = 25
    # architecture
    channels: Tuple[int, ...] = (8, 16, 32)
    stages: int = 3
    embed_dim: int = 512
    use_sci: bool = True
    sci_variant: str = "negative"
    # optimisation
    epochs: int = 40
    base_lr: float = 0.02
    lr_decay: float = 0.5
    lr_decay_every: int = 20
    weight_decay: float = 2e-4
    momentum: float = 0.9
    init_gain: float = 2.449489742783178  # sqrt(6): He-uniform weights
    clip_norm: Optional[float] = 2.0
    alpha: float = 2.0
    beta: float = 0.5
    cci_enabled: bool = True
    gates_forced_zero: bool = False
    flip: bool = False
    variant: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.variant is not None:
            if self.variant not in VARIANTS:
                raise ConfigError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}", "variant")
            for k, v in VARIANTS[self.variant].items():
                object.__setattr__(self, k, v)
        # construct the typed configs once so bad values fail here, naming the field
        self.data_config()
        self.train_config()
        self.model_config(self.num_superclasses * self.subclasses_per_superclass)

    def data_config(self) -> SyntheticTaskConfig:
        return SyntheticTaskConfig(
            num_superclasses=self.num_superclasses,
            subclasses_per_superclass=self.subclasses_per_superclass,
            image_size=self.image_size,
            glyph_size=self.glyph_size,
            noise_std=self.noise_std,
            texture_amplitude=self.texture_amplitude,
            train_per_class=self.train_per_class,
            val_per_class=self.val_per_class,
            seed=self.seed,
        )

    def model_config(self, num_classes: int, image_size: Optional[int] = None) -> ModelConfig:
        backbone = BackboneConfig(input_size=image_size or self.image_size, channels=self.channels, stages=self.stages)
        return ModelConfig(backbone, num_classes, self.embed_dim, self.use_sci, self.sci_variant)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


def resolve(config_path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults <- JSON file <- overrides. Unknown keys raise :class:`ConfigError` naming the key."""
    values = {}
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}", "config") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object", "config")
        values.update(loaded)
    values.update(overrides or {})
    for key in values:
        if key not in FIELD_NAMES:
            raise ConfigError(f"unknown config field {key!r}", key)
    preset = VARIANTS.get(values.get("variant"), {})
    for key, value in preset.items():
        if key in values and values[key] != value:
            raise ConfigError(f"{key}={values[key]!r} contradicts variant {values['variant']!r}", key)
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), next(iter(values), None)) from exc


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **kw)
