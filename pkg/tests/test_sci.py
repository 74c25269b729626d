import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cin import oracle as O
from cin import tensor as T
from cin.backbone import FeatureMap, unflatten
from cin.errors import NonFiniteError
from cin.oracle import finite_diff_grad
from cin.sci import SciWeights, complementary_topk, sci_forward, sci_logits, sci_weights
from cin.tensor import GradTape, Tensor, backward

variants = st.sampled_from(["negative", "positive"])
features = arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 16)),
                  elements=st.floats(-3, 3, allow_nan=False))


def phi_params(c, rng=None, zero=False):
    if zero:
        return {"phi.weight": Tensor(np.zeros((3, 3, c, c))), "phi.bias": Tensor(np.zeros(c))}
    return {"phi.weight": Tensor(rng.normal(scale=0.3, size=(3, 3, c, c))), "phi.bias": Tensor(rng.normal(size=c))}


def test_identical_channels_give_uniform_weights():
    x = np.tile([[0.3, -1.2, 2.0, 0.1]], (5, 1))
    np.testing.assert_allclose(sci_weights(Tensor(x)).w.data, 1 / 5, rtol=0, atol=1e-15)


def test_two_channel_known_weights():
    w = sci_weights(Tensor(np.eye(2))).w.data
    e = np.exp(-1.0)
    np.testing.assert_allclose(w, [[e / (1 + e), 1 / (1 + e)], [1 / (1 + e), e / (1 + e)]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(w, [[0.26894, 0.73106], [0.73106, 0.26894]], atol=1e-5)
    assert complementary_topk(SciWeights(Tensor(w)), 0, 1) == [1]


@given(features, variants)
def test_rows_sum_to_one(x, variant):
    w = sci_weights(Tensor(x), variant).w.data
    assert (w >= 0).all() and (w <= 1).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@given(features)
def test_negative_logits_negate_positive(x):
    assert np.array_equal(sci_logits(Tensor(x), "negative").data, -sci_logits(Tensor(x), "positive").data)


@given(features, variants, st.randoms(use_true_random=False))
def test_channel_permutation_equivariance(x, variant, r):
    perm = np.array(r.sample(range(len(x)), len(x)))
    w = sci_weights(Tensor(x), variant).w.data
    wp = sci_weights(Tensor(x[perm]), variant).w.data
    np.testing.assert_allclose(wp, w[np.ix_(perm, perm)], rtol=0, atol=1e-12)
    y = (w @ x)[perm]
    np.testing.assert_allclose(wp @ x[perm], y, rtol=0, atol=1e-10)


def test_non_finite_input():
    with pytest.raises(NonFiniteError):
        sci_weights(Tensor._wrap(np.array([[1.0, np.inf], [0.0, 1.0]]), False))


def test_zero_phi_gives_residual_identity(rng):
    fm = FeatureMap(Tensor(rng.normal(size=(3, 3, 4))))
    out = sci_forward(fm, phi_params(4, zero=True))
    assert np.array_equal(out.z.data, fm.spatial.data)


def test_identical_channels_mix_to_channel_mean(rng):
    x = np.repeat(rng.normal(size=(2, 2, 1)), 3, axis=2)
    out = sci_forward(FeatureMap(Tensor(x)), phi_params(3, zero=True))
    for row in out.y.data:
        np.testing.assert_allclose(row, x[..., 0].ravel(), rtol=0, atol=1e-15)


def test_output_invariants(rng):
    fm = FeatureMap(Tensor(rng.normal(size=(4, 3, 5))))
    params = phi_params(5, rng)
    out = sci_forward(fm, params)
    assert np.array_equal(out.y.data, T.matmul(out.weights.w, fm.flattened).data)
    phi_y = T.conv2d_3x3(unflatten(out.y, 4, 3), params["phi.weight"], params["phi.bias"]).data
    assert np.array_equal(out.z.data - fm.spatial.data, (phi_y + fm.spatial.data) - fm.spatial.data)


@pytest.mark.parametrize("variant", ["negative", "positive"])
def test_small_map_against_oracle(rng, variant):
    x = rng.normal(size=(2, 2, 3))
    params = phi_params(3, rng)
    fm = FeatureMap(Tensor(x))
    out = sci_forward(fm, params, variant)
    ref = O.oracle_sci(fm.flattened.data, variant, 2, 2, params["phi.weight"].data, params["phi.bias"].data)
    for got, want in ((out.weights.w, ref.w), (out.y, ref.y), (out.z, ref.z)):
        np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)


def test_diagonal_is_not_masked():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert (np.diag(sci_weights(Tensor(x)).w.data) > 0).all()


def test_gradient_of_z_wrt_input(rng):
    x0 = rng.normal(size=(2, 2, 3))
    params = phi_params(3, rng)
    r = rng.normal(size=(2, 2, 3))

    def f(arrays):
        return float((sci_forward(FeatureMap(Tensor(arrays["x"])), params).z.data * r).sum())

    x = Tensor(x0, requires_grad=True, name="x")
    with GradTape() as tape:
        loss = T.tensor_sum(T.mul(sci_forward(FeatureMap(x), params).z, Tensor(r)))
    analytic = backward(loss, tape)["x"].data
    numeric = finite_diff_grad(f, {"x": x0})["x"]
    _, rel = O.gradient_error({"x": analytic}, {"x": numeric})
    assert rel < 1e-6


class TestComplementaryTopk:
    def test_uniform_ties_go_low(self):
        assert complementary_topk(SciWeights(Tensor(np.full((5, 5), 0.2))), 2, 3) == [0, 1, 2]

    def test_descending(self):
        w = np.array([[0.1, 0.7, 0.2], [0.3, 0.3, 0.4], [0.5, 0.25, 0.25]])
        assert complementary_topk(SciWeights(Tensor(w)), 0, 2) == [1, 2]

    def test_bad_channel(self):
        with pytest.raises(IndexError):
            complementary_topk(SciWeights(Tensor(np.full((3, 3), 1 / 3))), 3, 1)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            complementary_topk(SciWeights(Tensor(np.full((3, 3), 1 / 3))), 0, 4)
