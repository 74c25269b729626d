"""Slow, independent references for the tensor core and the interaction modules.

The loop implementations here operate on plain Python lists with ``math.exp``
and share no arithmetic with :mod:`cin.tensor`. :func:`finite_diff_grad`
estimates gradients by central differences and :func:`run_suite` ties
everything together for the ``gradcheck`` command.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterator, List, Mapping, NamedTuple, Optional

import numpy as np

from .errors import NonFiniteError

FORWARD_TOL = 1e-12
OP_GRAD_TOL = 1e-6
PIPELINE_GRAD_TOL = 1e-5
KINK_MARGIN = 1e-3
FD_STEP = 1e-5
REL_FLOOR = 1e-3


def _lists(a):
    return a.tolist() if hasattr(a, "tolist") else a


# ---------------------------------------------------------------- loop primitives


def oracle_matmul(a, b) -> List[List[float]]:
    a, b = _lists(a), _lists(b)
    m, k, n = len(a), len(b), len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def oracle_conv2d_3x3(x, kernel, bias) -> List:
    """Zero-padded 3x3 cross-correlation on an (h, w, c_in) nested list."""
    x, kernel, bias = _lists(x), _lists(kernel), _lists(bias)
    h, w, c_in, c_out = len(x), len(x[0]), len(x[0][0]), len(bias)
    out = [[[0.0] * c_out for _ in range(w)] for _ in range(h)]
    for r in range(h):
        for c in range(w):
            for o in range(c_out):
                s = bias[o]
                for di in range(3):
                    for dj in range(3):
                        rr, cc = r + di - 1, c + dj - 1
                        if 0 <= rr < h and 0 <= cc < w:
                            for i in range(c_in):
                                s += x[rr][cc][i] * kernel[di][dj][i][o]
                out[r][c][o] = s
    return out


def oracle_fc(x, weight, bias) -> List[float]:
    x, weight, bias = _lists(x), _lists(weight), _lists(bias)
    out = []
    for o in range(len(weight)):
        s = bias[o]
        for i in range(len(x)):
            s += weight[o][i] * x[i]
        out.append(s)
    return out


def oracle_row_softmax(a) -> List[List[float]]:
    out = []
    for row in _lists(a):
        top = max(row)
        e = [math.exp(v - top) for v in row]
        total = sum(e)
        out.append([v / total for v in e])
    return out


def _to_flat(x_spatial) -> List[List[float]]:
    h, w, c = len(x_spatial), len(x_spatial[0]), len(x_spatial[0][0])
    return [[x_spatial[j][k][i] for j in range(h) for k in range(w)] for i in range(c)]


def _to_spatial(y, h, w) -> List:
    c = len(y)
    return [[[y[i][j * w + k] for i in range(c)] for k in range(w)] for j in range(h)]


def _add3(a, b):
    return [[[u + v for u, v in zip(ra, rb)] for ra, rb in zip(pa, pb)] for pa, pb in zip(a, b)]


# ---------------------------------------------------------------- interaction modules


class SciReference(NamedTuple):
    w: list
    y: list
    phi_y: Optional[list]
    z: Optional[list]


def oracle_sci(x, variant: str = "negative", height=None, width=None, kernel=None, bias=None) -> SciReference:
    """Interaction matrix, mixed features and (given phi) the residual output for a (c, l) input."""
    x = _lists(x)
    c, l = len(x), len(x[0])
    sign = -1.0 if variant == "negative" else 1.0
    logits = [[0.0] * c for _ in range(c)]
    for i in range(c):
        for j in range(c):
            s = 0.0
            for t in range(l):
                s += x[i][t] * x[j][t]
            logits[i][j] = sign * s
    w = oracle_row_softmax(logits)
    y = [[sum(w[i][k] * x[k][t] for k in range(c)) for t in range(l)] for i in range(c)]
    if kernel is None:
        return SciReference(w, y, None, None)
    phi_y = oracle_conv2d_3x3(_to_spatial(y, height, width), kernel, bias)
    return SciReference(w, y, phi_y, _add3(phi_y, _to_spatial(x, height, width)))


def oracle_gate(y_a, y_b, psi_weight, psi_bias):
    """eta and gamma from position-averaged (c, l) features through a single affine unit."""
    y_a, y_b = _lists(y_a), _lists(y_b)
    pa = [sum(r) / len(r) for r in y_a]
    pb = [sum(r) / len(r) for r in y_b]
    return oracle_fc(pa + pb, psi_weight, psi_bias)[0], oracle_fc(pb + pa, psi_weight, psi_bias)[0]


class CciReference(NamedTuple):
    w_ab: list
    w_ba: list
    y_a: list
    y_b: list
    z_a: Optional[list]
    z_b: Optional[list]


def oracle_cci(x_a, x_b, eta: float, gamma: float, variant="negative", height=None, width=None,
               kernel=None, bias=None) -> CciReference:
    x_a, x_b = _lists(x_a), _lists(x_b)
    w_a = oracle_sci(x_a, variant).w
    w_b = oracle_sci(x_b, variant).w
    c, l = len(x_a), len(x_a[0])
    w_ab = [[abs(w_a[i][j] - eta * w_b[i][j]) for j in range(c)] for i in range(c)]
    w_ba = [[abs(w_b[i][j] - gamma * w_a[i][j]) for j in range(c)] for i in range(c)]
    y_a = [[sum(w_ab[i][k] * x_a[k][t] for k in range(c)) for t in range(l)] for i in range(c)]
    y_b = [[sum(w_ba[i][k] * x_b[k][t] for k in range(c)) for t in range(l)] for i in range(c)]
    if kernel is None:
        return CciReference(w_ab, w_ba, y_a, y_b, None, None)
    z_a = _add3(oracle_conv2d_3x3(_to_spatial(y_a, height, width), kernel, bias), _to_spatial(x_a, height, width))
    z_b = _add3(oracle_conv2d_3x3(_to_spatial(y_b, height, width), kernel, bias), _to_spatial(x_b, height, width))
    return CciReference(w_ab, w_ba, y_a, y_b, z_a, z_b)


def oracle_contrastive(e_a, e_b, y_ab: int, beta: float) -> float:
    d = math.sqrt(sum((u - v) ** 2 for u, v in zip(_lists(e_a), _lists(e_b))))
    return d * d if y_ab == 1 else max(0.0, beta - d) ** 2


# ---------------------------------------------------------------- finite differences


def finite_diff_grad(f: Callable[[Dict[str, np.ndarray]], float], params: Mapping[str, np.ndarray],
                     step: float = FD_STEP) -> Dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params`` (one probe pair per scalar)."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = f(base)
            arr[idx] = orig - step
            fm = f(base)
            arr[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite probe for {name}{list(idx)}")
            g[idx] = (fp - fm) / (2 * step)
        grads[name] = g
    return grads


@dataclass
class OracleReport:
    op: str
    check: str
    max_abs_err: float
    max_rel_err: float
    tolerance: float
    passed: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def gradient_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]):
    """(max abs error, max per-tensor relative error) over all entries.

    Each tensor's error is divided by its largest gradient magnitude, floored at
    ``REL_FLOOR`` times the largest magnitude over all tensors so that an exactly
    zero gradient is compared against the problem's scale rather than against
    finite-difference rounding noise.
    """
    mags = [max(float(np.max(np.abs(analytic[k]), initial=0)), float(np.max(np.abs(v), initial=0)))
            for k, v in numeric.items()]
    floor = max(REL_FLOOR * max(mags, default=0.0), 1e-300)
    abs_err = rel_err = 0.0
    for (name, num), mag in zip(numeric.items(), mags):
        ana = np.asarray(analytic[name])
        diff = float(np.max(np.abs(ana - num))) if num.size else 0.0
        abs_err = max(abs_err, diff)
        rel_err = max(rel_err, diff / max(mag, floor))
    return abs_err, rel_err


def forward_error(got, want):
    got, want = np.asarray(got, dtype=np.float64), np.asarray(want, dtype=np.float64)
    err = float(np.max(np.abs(got - want)))
    return err, err / max(float(np.max(np.abs(want))), 1e-300)


# ---------------------------------------------------------------- suite


def run_suite(seed: int = 0, instances: int = 100) -> Iterator[OracleReport]:
    """Gradient check of every registered op, loop-oracle equivalence, and the full-objective gradient."""
    from . import checks

    rng = np.random.default_rng(seed)
    yield from checks.op_gradient_reports(rng)
    yield from checks.forward_reports(rng, instances)
    yield checks.pipeline_gradient_report(rng)
