"""Model configuration and the named parameter store."""
from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator

import numpy as np

from .backbone import BackboneConfig
from .errors import ConfigError, DimensionError
from .tensor import Tensor

SCI_VARIANTS = ("negative", "positive")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the full network; this is what checkpoints hash."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 8
    embed_dim: int = 512
    use_sci: bool = True
    sci_variant: str = "negative"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", "num_classes")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive", "embed_dim")
        if self.sci_variant not in SCI_VARIANTS:
            raise ConfigError(f"sci_variant must be one of {SCI_VARIANTS}", "sci_variant")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["channels"] = list(self.backbone.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Names and shapes of every learnable tensor, in canonical order."""
    bb = config.backbone
    shapes = {}
    c_in = bb.in_channels
    for i, c_out in enumerate(bb.channels):
        shapes[f"backbone.conv{i}.weight"] = (3, 3, c_in, c_out)
        shapes[f"backbone.conv{i}.bias"] = (c_out,)
        c_in = c_out
    c = bb.out_channels
    shapes["phi.weight"] = (3, 3, c, c)
    shapes["phi.bias"] = (c,)
    shapes["psi.weight"] = (1, 2 * c)
    shapes["psi.bias"] = (1,)
    shapes["proj.weight"] = (config.embed_dim, c)
    shapes["proj.bias"] = (config.embed_dim,)
    shapes["classifier.weight"] = (config.num_classes, c)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith(".weight"):
        return int(np.prod(shape[:-1])) if len(shape) == 4 else shape[1]
    return 0


class ModelParams(Mapping):
    """Immutable name -> Tensor map; every tensor is a gradient-tracked leaf."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._tensors = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in arrays.items()}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, gain: float = 1.0) -> "ModelParams":
        """Uniform init in [-s, s] with s = sqrt(1 / fan_in); biases share their weight's fan-in.

        ``gain`` widens the weight range (not the bias range); ``sqrt(6)`` gives He-uniform.
        """
        rng = np.random.default_rng(seed)
        shapes = param_shapes(config)
        arrays = {}
        for name, shape in shapes.items():
            weight_name = name.replace(".bias", ".weight")
            s = np.sqrt(1.0 / _fan_in(weight_name, shapes[weight_name]))
            if name.endswith(".weight"):
                s *= gain
            arrays[name] = rng.uniform(-s, s, size=shape)
        return cls(arrays)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        """New params with some tensors swapped out; shapes must not change."""
        arrays = self.arrays()
        for name, arr in updates.items():
            if name not in arrays:
                raise KeyError(name)
            arr = np.asarray(arr)
            if arr.shape != arrays[name].shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {arrays[name].shape}")
            arrays[name] = arr
        return ModelParams(arrays)

    def bitwise_equal(self, other: "ModelParams") -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[k].data.shape == other[k].data.shape and self[k].data.tobytes() == other[k].data.tobytes()
            for k in self
        )

    def num_scalars(self) -> int:
        return sum(t.size for t in self._tensors.values())
