"""Small convolutional feature extractor and the spatial/channel reshape convention.

Flattening convention: a spatial map ``x`` of shape (h, w, c) becomes a
(c, l) matrix with ``flat[i, j * w + k] == x[j, k, i]``, l = h * w. Every
routine below also accepts a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, RankError
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 32
    channels: Tuple[int, ...] = (8, 16, 32)
    stages: int = 3
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.stages != len(self.channels):
            raise ConfigError(f"stages={self.stages} but {len(self.channels)} channel entries", "stages")
        if self.stages < 1 or any(c < 1 for c in self.channels):
            raise ConfigError("channels must be positive and at least one stage is required", "channels")
        if self.input_size % (2 ** self.stages):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2^{self.stages}", "input_size")
        if self.output_size < 2:
            raise ConfigError(
                f"output spatial extent {self.output_size} < 2; use a larger input_size or fewer stages",
                "input_size",
            )
        if self.out_channels < 2:
            raise ConfigError("the last stage needs at least 2 channels", "channels")

    @property
    def output_size(self) -> int:
        return self.input_size // 2 ** self.stages

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class FeatureMap:
    """Backbone output in both layouts: spatial (h, w, c) and flattened (c, l)."""

    spatial: Tensor
    flattened: Tensor = field(default=None)

    def __post_init__(self):
        if self.flattened is None:
            object.__setattr__(self, "flattened", flatten(self.spatial))
        c, l = self.flattened.shape[-2:]
        if c < 2 or l < 2:
            raise DimensionError(f"feature map needs c >= 2 and l >= 2, got c={c}, l={l}")

    @property
    def height(self) -> int:
        return self.spatial.shape[-3]

    @property
    def width(self) -> int:
        return self.spatial.shape[-2]

    @property
    def channels(self) -> int:
        return self.spatial.shape[-1]

    @property
    def batched(self) -> bool:
        return self.spatial.ndim == 4

    def take(self, indices) -> "FeatureMap":
        return FeatureMap(T.take(self.spatial, indices), T.take(self.flattened, indices))


def flatten(x: Tensor) -> Tensor:
    """(h, w, c) -> (c, h*w); (n, h, w, c) -> (n, c, h*w)."""
    if x.ndim not in (3, 4):
        raise RankError(f"flatten needs a rank-3 (or batched rank-4) tensor, got {x.shape}")
    h, w, c = x.shape[-3:]
    return T.transpose(T.reshape(x, x.shape[:-3] + (h * w, c)))


def unflatten(y: Tensor, height: int, width: int) -> Tensor:
    """Inverse of :func:`flatten`."""
    if y.ndim not in (2, 3) or y.shape[-1] != height * width:
        raise DimensionError(f"cannot unflatten {y.shape} to {height}x{width}")
    c = y.shape[-2]
    return T.reshape(T.transpose(y), y.shape[:-2] + (height, width, c))


def extract(image: Tensor, params, config: BackboneConfig) -> FeatureMap:
    """Run the conv -> relu -> 2x2 mean-pool stages on one image or a batch."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    expected = (config.input_size, config.input_size, config.in_channels)
    if image.ndim not in (3, 4) or image.shape[-3:] != expected:
        raise DimensionError(f"backbone expects images of shape {expected}, got {image.shape}")
    x = image
    for i in range(config.stages):
        x = T.conv2d_3x3(x, params[f"backbone.conv{i}.weight"], params[f"backbone.conv{i}.bias"])
        x = T.avg_pool2x2(T.relu(x))
    return FeatureMap(x)


PIXEL_MEAN = 0.5


def preprocess(images) -> Tensor:
    """Shift [0, 1] pixels to be zero-centred."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    return Tensor(images - PIXEL_MEAN)


def image_features(images, params, config: BackboneConfig) -> FeatureMap:
    """Backbone features of raw [0, 1] images: :func:`preprocess` then :func:`extract`."""
    return extract(preprocess(images), params, config)
