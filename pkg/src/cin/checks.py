"""Randomised gradient and oracle checks shared by the test-suite and the ``gradcheck`` command."""
from __future__ import annotations

from typing import Callable, Dict, Iterator, Tuple

import numpy as np

from . import oracle as O
from . import tensor as T
from .backbone import BackboneConfig, FeatureMap
from .cci import CciGates, cci_forward, gate
from .errors import ContractError
from .model import ModelConfig, ModelParams
from .sci import sci_forward
from .tensor import GradTape, Tensor, backward

Case = Tuple[Dict[str, np.ndarray], Callable[[Dict[str, Tensor]], Tensor]]


def _n(rng, *shape):
    return rng.normal(size=shape)


def _op_cases(rng) -> Dict[str, Callable[[], Case]]:
    """One randomised instance generator per differentiable op (shapes stay within 6x6x4)."""
    return {
        "matmul": lambda: ({"a": _n(rng, 3, 4), "b": _n(rng, 4, 2)}, lambda p: T.matmul(p["a"], p["b"])),
        "transpose": lambda: ({"a": _n(rng, 2, 3, 4)}, lambda p: T.transpose(p["a"])),
        "row_softmax": lambda: ({"a": _n(rng, 4, 5)}, lambda p: T.row_softmax(p["a"])),
        "conv2d_3x3": lambda: (
            {"x": _n(rng, 2, 5, 4, 3), "k": _n(rng, 3, 3, 3, 2), "b": _n(rng, 2)},
            lambda p: T.conv2d_3x3(p["x"], p["k"], p["b"]),
        ),
        "fully_connected": lambda: (
            {"x": _n(rng, 3, 4), "w": _n(rng, 2, 4), "b": _n(rng, 2)},
            lambda p: T.fully_connected(p["x"], p["w"], p["b"]),
        ),
        "add": lambda: ({"a": _n(rng, 3, 2), "b": _n(rng)}, lambda p: T.add(p["a"], p["b"])),
        "sub": lambda: ({"a": _n(rng, 3, 2), "b": _n(rng, 3, 2)}, lambda p: T.sub(p["a"], p["b"])),
        "mul": lambda: ({"a": _n(rng, 3, 2), "b": _n(rng, 3, 2)}, lambda p: T.mul(p["a"], p["b"])),
        "neg": lambda: ({"a": _n(rng, 4)}, lambda p: T.neg(p["a"])),
        "scale": lambda: ({"a": _n(rng, 2, 3)}, lambda p: T.scale(p["a"], -1.7)),
        "abs": lambda: ({"a": _n(rng, 3, 3)}, lambda p: T.abs(p["a"])),
        "relu": lambda: ({"a": _n(rng, 3, 3)}, lambda p: T.relu(p["a"])),
        "batch_scale": lambda: ({"x": _n(rng, 3, 2, 2), "s": _n(rng, 3)}, lambda p: T.batch_scale(p["x"], p["s"])),
        "pool_spatial_mean": lambda: ({"x": _n(rng, 2, 3, 4, 2)}, lambda p: T.pool_spatial_mean(p["x"])),
        "avg_pool2x2": lambda: ({"x": _n(rng, 4, 6, 3)}, lambda p: T.avg_pool2x2(p["x"])),
        "tensor_sum": lambda: ({"x": _n(rng, 3, 4)}, lambda p: T.tensor_sum(p["x"], axis=-1)),
        "row_norm": lambda: ({"x": _n(rng, 3, 4)}, lambda p: T.row_norm(p["x"])),
        "cross_entropy": lambda: (
            {"z": _n(rng, 4, 5)},
            lambda p, labels=rng.integers(0, 5, size=4): T.cross_entropy(p["z"], labels),
        ),
        "reshape": lambda: ({"x": _n(rng, 2, 6)}, lambda p: T.reshape(p["x"], (3, 4))),
        "concat": lambda: ({"a": _n(rng, 2, 3), "b": _n(rng, 1, 3)}, lambda p: T.concat([p["a"], p["b"]])),
        "take": lambda: ({"x": _n(rng, 4, 2)}, lambda p: T.take(p["x"], [2, 0, 2])),
    }


def _leaves(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def _screened(make: Callable[[], Case], loss_of, tries: int = 200):
    """Draw instances until every relu/abs/norm argument is at least KINK_MARGIN from its kink."""
    for _ in range(tries):
        arrays, fn = make()
        with GradTape() as tape:
            loss = loss_of(fn, _leaves(arrays))
        if tape.kink_margin >= O.KINK_MARGIN:
            return arrays, fn, tape, loss
    raise ContractError("could not draw a probe point away from nondifferentiable kinks")


def op_gradient_reports(rng) -> Iterator[O.OracleReport]:
    cases = _op_cases(rng)
    missing = set(T.DIFFERENTIABLE_OPS) - set(cases)
    if missing:
        raise ContractError(f"no gradient check registered for ops: {sorted(missing)}")
    for name in T.DIFFERENTIABLE_OPS:
        weights = {}

        def loss_of(fn, leaves):
            out = fn(leaves)
            if "r" not in weights:
                weights["r"] = rng.normal(size=out.shape)
            return T.tensor_sum(T.mul(out, Tensor(weights["r"])))

        arrays, fn, tape, loss = _screened(cases[name], loss_of)
        analytic = {k: g.data for k, g in backward(loss, tape, _leaves(arrays)).items()}
        numeric = O.finite_diff_grad(lambda a: loss_of(fn, _leaves(a)).item(), arrays)
        abs_err, rel_err = O.gradient_error(analytic, numeric)
        yield O.OracleReport(name, "gradient", abs_err, rel_err, O.OP_GRAD_TOL, rel_err < O.OP_GRAD_TOL)


# ---------------------------------------------------------------- forward equivalence


def _micro_instance(rng):
    c = int(rng.integers(2, 9))
    h, w = [(1, 2), (2, 2), (2, 3), (3, 3), (2, 4), (4, 4), (3, 5)][int(rng.integers(0, 7))]
    if rng.random() < 0.5:
        h, w = w, h
    s = 1.0 / np.sqrt(c)
    x = rng.normal(scale=s, size=(h, w, c))
    kernel = rng.normal(scale=0.3, size=(3, 3, c, c))
    bias = rng.normal(size=c)
    return x, kernel, bias


def forward_reports(rng, instances: int = 100) -> Iterator[O.OracleReport]:
    keys = ("matmul", "conv2d_3x3", "fully_connected", "sci_forward", "gate", "cci_forward")
    worst = {k: [0.0, 0.0] for k in keys}

    def note(key, got, want):
        abs_err, rel_err = O.forward_error(got, want)
        worst[key] = [max(worst[key][0], abs_err), max(worst[key][1], rel_err)]

    for _ in range(instances):
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(2, 4))
        note("matmul", T.matmul(Tensor(a), Tensor(b)).data, O.oracle_matmul(a, b))
        x = rng.normal(size=(4, 4, 2))
        k, kb = rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
        note("conv2d_3x3", T.conv2d_3x3(Tensor(x), Tensor(k), Tensor(kb)).data, O.oracle_conv2d_3x3(x, k, kb))
        v, wt, bb = rng.normal(size=3), rng.normal(size=(2, 3)), rng.normal(size=2)
        note("fully_connected", T.fully_connected(Tensor(v), Tensor(wt), Tensor(bb)).data, O.oracle_fc(v, wt, bb))

        xa, kernel, bias = _micro_instance(rng)
        xb = rng.normal(scale=1.0 / np.sqrt(xa.shape[-1]), size=xa.shape)
        h, w, c = xa.shape
        variant = "negative" if rng.random() < 0.5 else "positive"
        params = {"phi.weight": Tensor(kernel), "phi.bias": Tensor(bias),
                  "psi.weight": Tensor(rng.normal(size=(1, 2 * c))), "psi.bias": Tensor(rng.normal(size=1))}
        fa, fb = FeatureMap(Tensor(xa)), FeatureMap(Tensor(xb))
        sa, sb = sci_forward(fa, params, variant), sci_forward(fb, params, variant)
        ref = O.oracle_sci(fa.flattened.data, variant, h, w, kernel, bias)
        note("sci_forward", sa.weights.w.data, ref.w)
        note("sci_forward", sa.y.data, ref.y)
        note("sci_forward", sa.z.data, ref.z)

        g = gate(sa.y, sb.y, params)
        eta, gamma = O.oracle_gate(sa.y.data, sb.y.data, params["psi.weight"].data, params["psi.bias"].data)
        note("gate", [g.eta.item(), g.gamma.item()], [eta, gamma])

        # drive the oracle with the module's own gates so only the cross-weighting is compared
        out = cci_forward(fa, fb, sa, sb, params, CciGates(g.eta, g.gamma))
        ref = O.oracle_cci(fa.flattened.data, fb.flattened.data, g.eta.item(), g.gamma.item(),
                           variant, h, w, kernel, bias)
        for got, want in ((out.w_ab, ref.w_ab), (out.w_ba, ref.w_ba), (out.y_a_prime, ref.y_a),
                          (out.y_b_prime, ref.y_b), (out.z_a_prime, ref.z_a), (out.z_b_prime, ref.z_b)):
            note("cci_forward", got.data, want)

    for key, (abs_err, rel_err) in worst.items():
        yield O.OracleReport(key, "forward", abs_err, rel_err, O.FORWARD_TOL, abs_err <= O.FORWARD_TOL)


# ---------------------------------------------------------------- full objective


def micro_model_config() -> ModelConfig:
    """Two-stage backbone on 8x8x3 images: small enough to finite-difference every parameter."""
    return ModelConfig(backbone=BackboneConfig(input_size=8, channels=(3, 4), stages=2),
                       num_classes=3, embed_dim=6)


def micro_batch(rng):
    """Two pairs (one positive, one negative) of 8x8x3 images, laid out [A1, A2, B1, B2]."""
    images = rng.random((4, 8, 8, 3))
    labels = np.array([0, 1, 0, 2])
    y_ab = (labels[:2] == labels[2:]).astype(int)
    return images, labels, y_ab


def pipeline_gradient_report(rng, tries: int = 300) -> O.OracleReport:
    from .trainer import TrainConfig, compute_losses

    mc = micro_model_config()
    tc = TrainConfig(cci_enabled=True)
    for _ in range(tries):
        init = ModelParams.initialize(mc, seed=int(rng.integers(2**31)))
        # spread the parameters out so the softmax, gates and hinge are all far from trivial
        params = init.replace({k: 3.0 * v for k, v in init.arrays().items()})
        images, labels, y_ab = micro_batch(rng)
        with GradTape() as tape:
            losses = compute_losses(images, labels, y_ab, params, mc, tc)
        if tape.kink_margin >= O.KINK_MARGIN:
            break
    else:
        raise ContractError("could not draw a kink-free probe for the full objective")
    analytic = {k: g.data for k, g in backward(losses.total, tape, params).items()}

    def f(arrays):
        return compute_losses(images, labels, y_ab, ModelParams(arrays), mc, tc).total.item()

    numeric = O.finite_diff_grad(f, params.arrays())
    abs_err, rel_err = O.gradient_error(analytic, numeric)
    return O.OracleReport("total_loss", "gradient", abs_err, rel_err, O.PIPELINE_GRAD_TOL,
                          rel_err < O.PIPELINE_GRAD_TOL)
