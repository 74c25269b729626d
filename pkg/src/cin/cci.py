"""Contrastive channel interaction and the pair losses built on it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .backbone import FeatureMap
from .errors import ContractError, DimensionError
from .sci import SciOutput, aggregate, mix
from .tensor import Tensor

DEFAULT_ALPHA = 2.0
DEFAULT_BETA = 0.5
DEFAULT_EMBED_DIM = 512


@dataclass(frozen=True)
class CciGates:
    eta: Tensor
    gamma: Tensor


@dataclass(frozen=True)
class CciOutput:
    w_ab: Tensor
    w_ba: Tensor
    y_a_prime: Tensor
    y_b_prime: Tensor
    z_a_prime: Tensor
    z_b_prime: Tensor
    gates: CciGates


@dataclass(frozen=True)
class ContrastivePair:
    image_a: Tensor
    image_b: Tensor
    y_ab: int

    @classmethod
    def from_labels(cls, image_a, image_b, label_a, label_b) -> "ContrastivePair":
        return cls(image_a, image_b, int(label_a == label_b))

    def __post_init__(self):
        if self.y_ab not in (0, 1):
            raise ValueError(f"y_ab must be 0 or 1, got {self.y_ab}")


def _position_mean(y: Tensor) -> Tensor:
    # (c, l) -> (c,): same as spatial mean pooling of the unflattened map
    return T.scale(T.tensor_sum(y, axis=-1), 1.0 / y.shape[-1])


def _psi(first: Tensor, second: Tensor, params) -> Tensor:
    out = T.fully_connected(T.concat([first, second], axis=-1), params["psi.weight"], params["psi.bias"])
    return T.reshape(out, out.shape[:-1])


def gate(y_a: Tensor, y_b: Tensor, params) -> CciGates:
    """eta from the ordered pair (A, B), gamma from (B, A), through one shared affine layer."""
    if y_a.shape != y_b.shape:
        raise DimensionError(f"gate inputs differ in shape: {y_a.shape} vs {y_b.shape}")
    pa, pb = _position_mean(y_a), _position_mean(y_b)
    return CciGates(_psi(pa, pb, params), _psi(pb, pa, params))


def _gated(w: Tensor, g: Tensor) -> Tensor:
    return T.mul(g, w) if g.ndim == 0 else T.batch_scale(w, g)


def contrastive_weights(w_a: Tensor, w_b: Tensor, gates: CciGates) -> Tuple[Tensor, Tensor]:
    """|W_A - eta W_B| and |W_B - gamma W_A| (no renormalisation)."""
    w_ab = T.abs(T.sub(w_a, _gated(w_b, gates.eta)))
    w_ba = T.abs(T.sub(w_b, _gated(w_a, gates.gamma)))
    return w_ab, w_ba


def cci_forward(
    fm_a: FeatureMap,
    fm_b: FeatureMap,
    sci_a: SciOutput,
    sci_b: SciOutput,
    params,
    gates: Optional[CciGates] = None,
    b_residual_from_a: bool = False,
) -> CciOutput:
    """Cross-image features for one pair, or for N pairs stacked along a leading axis.

    ``gates`` overrides the learned eta/gamma (e.g. zeros for the SCI+Cont
    ablation). ``b_residual_from_a`` adds X_A instead of X_B to the B output, an
    alternative (asymmetric) reading kept only so tests can document it.
    """
    if fm_a.spatial.shape != fm_b.spatial.shape:
        raise DimensionError(f"pair feature maps differ: {fm_a.spatial.shape} vs {fm_b.spatial.shape}")
    if gates is None:
        gates = gate(sci_a.y, sci_b.y, params)
    w_ab, w_ba = contrastive_weights(sci_a.weights.w, sci_b.weights.w, gates)
    y_a, z_a = aggregate(w_ab, fm_a, params)
    y_b, phi_b = mix(w_ba, fm_b, params)
    z_b = T.add(phi_b, fm_a.spatial if b_residual_from_a else fm_b.spatial)
    return CciOutput(w_ab, w_ba, y_a, y_b, z_a, z_b, gates)


def zero_gates(n: Optional[int] = None) -> CciGates:
    z = Tensor(0.0) if n is None else Tensor(np.zeros(n))
    return CciGates(z, z)


def project(z: Tensor, params) -> Tensor:
    """Embed a (h, w, c) map (or a stack of them) into r dimensions."""
    return T.fully_connected(T.pool_spatial_mean(z), params["proj.weight"], params["proj.bias"])


def contrastive_term(e_a: Tensor, e_b: Tensor, y_ab, beta: float = DEFAULT_BETA) -> Tensor:
    """Squared distance for same-class pairs, squared hinge max(0, beta - d) otherwise.

    With (N, r) embeddings and N labels, returns the N per-pair terms.
    """
    if beta <= 0:
        raise ValueError("margin beta must be positive")
    if e_a.shape != e_b.shape:
        raise DimensionError(f"embedding shapes differ: {e_a.shape} vs {e_b.shape}")
    y = np.asarray(y_ab, dtype=float)
    if y.shape != e_a.shape[:-1]:
        raise DimensionError(f"need one label per pair, got {y.shape} for embeddings {e_a.shape}")
    d = T.sub(e_a, e_b)
    sq = T.tensor_sum(T.mul(d, d), axis=-1)
    hinge = T.relu(T.sub(beta, T.row_norm(d)))
    return T.add(T.mul(Tensor(y), sq), T.mul(Tensor(1.0 - y), T.mul(hinge, hinge)))


def batch_contrastive_loss(z_a: Tensor, z_b: Tensor, y_ab, params, beta: float = DEFAULT_BETA) -> Tensor:
    """Mean contrastive term over N stacked pairs of post-CCI maps."""
    y = np.asarray(y_ab, dtype=float).reshape(-1)
    if y.size == 0 or z_a.ndim != 4:
        raise ContractError("batch_contrastive_loss needs a non-empty (N, h, w, c) stack of pairs")
    terms = contrastive_term(project(z_a, params), project(z_b, params), y, beta)
    return T.scale(T.tensor_sum(terms), 1.0 / y.size)


def total_loss(l_soft: Tensor, l_cont: Tensor, alpha: float = DEFAULT_ALPHA) -> Tensor:
    return T.add(l_soft, T.scale(l_cont, alpha))
