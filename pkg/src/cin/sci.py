"""Self-channel interaction.

The interaction matrix is a row-softmax over the negated channel Gram matrix,
so each channel draws most from the channels least similar to it. The
``"positive"`` variant drops the negation and favours similar channels instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import tensor as T
from .backbone import FeatureMap, unflatten
from .errors import DimensionError, NonFiniteError
from .model import SCI_VARIANTS
from .tensor import Tensor


@dataclass(frozen=True)
class SciWeights:
    w: Tensor
    variant: str = "negative"

    def take(self, indices) -> "SciWeights":
        return SciWeights(T.take(self.w, indices), self.variant)


@dataclass(frozen=True)
class SciOutput:
    y: Tensor
    z: Tensor
    weights: SciWeights

    def take(self, indices) -> "SciOutput":
        """Select batch items (the output must come from a batched forward pass)."""
        return SciOutput(T.take(self.y, indices), T.take(self.z, indices), self.weights.take(indices))


def sci_logits(x: Tensor, variant: str = "negative") -> Tensor:
    """Pre-softmax scores: -X X^T (negative) or +X X^T (positive)."""
    if variant not in SCI_VARIANTS:
        raise ValueError(f"unknown SCI variant {variant!r}")
    gram = T.matmul(x, T.transpose(x))
    return T.neg(gram) if variant == "negative" else gram


def sci_weights(x: Tensor, variant: str = "negative") -> SciWeights:
    """Channel interaction matrix of a (c, l) feature matrix (or an (n, c, l) stack)."""
    if x.ndim not in (2, 3) or x.shape[-2] < 2:
        raise DimensionError(f"sci_weights needs a (c, l) input with c >= 2, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NonFiniteError("sci_weights input is not finite")
    return SciWeights(T.row_softmax(sci_logits(x, variant)), variant)


def mix(w: Tensor, x: FeatureMap, params):
    """Return ``(y, phi(y))`` with y = w @ X, phi applied in the spatial layout."""
    y = T.matmul(w, x.flattened)
    return y, T.conv2d_3x3(unflatten(y, x.height, x.width), params["phi.weight"], params["phi.bias"])


def aggregate(w: Tensor, x: FeatureMap, params):
    """Mix channels with ``w`` and add the convolved result back onto the input: ``(y, z)``."""
    y, phi_y = mix(w, x, params)
    return y, T.add(phi_y, x.spatial)


def sci_forward(x: FeatureMap, params, variant: str = "negative") -> SciOutput:
    weights = sci_weights(x.flattened, variant)
    y, z = aggregate(weights.w, x, params)
    return SciOutput(y, z, weights)


def complementary_topk(weights: SciWeights, channel: int, k: int) -> List[int]:
    """Indices of the ``k`` largest entries in row ``channel``, descending, ties to the lower index."""
    w = weights.w.data
    if w.ndim != 2:
        raise DimensionError("complementary_topk needs a single (c, c) weight matrix")
    c = w.shape[0]
    if not 0 <= channel < c:
        raise IndexError(f"channel {channel} out of range for {c} channels")
    if not 1 <= k <= c:
        raise ValueError(f"k must be in [1, {c}], got {k}")
    order = np.argsort(-w[channel], kind="stable")
    return [int(i) for i in order[:k]]
