"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import DimensionError, RankError


def check_images(images, size: int = None, channels: int = 3) -> np.ndarray:
    """Return a finite float64 (n, s, s, channels) array or raise."""
    try:
        arr = check_array(images, dtype=np.float64, allow_nd=True, ensure_2d=False, ensure_all_finite=True)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    if arr.ndim != 4:
        raise RankError(f"expected a stack of images (n, h, w, {channels}), got shape {arr.shape}")
    if arr.shape[-1] != channels or arr.shape[1] != arr.shape[2]:
        raise DimensionError(f"expected square images with {channels} channels, got shape {arr.shape[1:]}")
    if size is not None and arr.shape[1] != size:
        raise DimensionError(f"expected {size}x{size} images, got {arr.shape[1]}x{arr.shape[2]}")
    return arr


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y
