"""Reverse-mode gradients checked against the central-difference oracle.

Everything runs at 64-bit precision: float32 rounding swamps the h^2
truncation error of central differences and makes the 1e-4 bound meaningless.
"""

import numpy as np
import pytest

from buildseg import ops
from buildseg import tensor as T
from buildseg.tensor import Tensor, finite_difference_gradient, precision


def relative_error(got, want):
    scale = max(np.abs(want).max(), np.abs(got).max(), 1e-8)
    return np.abs(got - want).max() / scale


def check_grad(build, shape, seed, tol=1e-4, h=1e-5, low=-1.0, high=1.0):
    """Compare autodiff and finite differences for ``build(x) -> scalar``."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(low, high, size=shape)
    with precision(64):
        x = Tensor(base.copy(), requires_grad=True)
        build(x).backward()
        got = x.grad
        want = finite_difference_gradient(build, Tensor(base.copy()), h=h)
    err = relative_error(got, want)
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"


SEEDS = range(10)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_chain(seed):
    check_grad(lambda x: ((x * x + 2.0) * T.sigmoid(x)).sum(), (3, 4), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_exp_log_softplus(seed):
    check_grad(lambda x: (T.exp(x) + T.log(T.softplus(x) + 1.0)).mean(), (2, 5), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gelu(seed):
    check_grad(lambda x: T.gelu(x).sum(), (4, 3), seed, low=-2.0, high=2.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_clamp_abs(seed):
    # keep samples away from the clamp kinks where the derivative jumps
    check_grad(lambda x: (T.clamp(x, -0.75, 0.75) + T.absolute(x) * 0.5).sum(), (6,), seed, h=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_minmax_reductions(seed):
    check_grad(lambda x: T.vmax(x) - T.vmin(x), (7,), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul(seed):
    rng = np.random.default_rng(seed + 100)
    other = rng.normal(size=(4, 3))
    check_grad(lambda x: (x @ Tensor(other)).sum(), (2, 4), seed)
    check_grad(lambda x: (Tensor(other) @ x).sum(), (3, 5), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_stacked(seed):
    rng = np.random.default_rng(seed + 200)
    other = rng.normal(size=(2, 4, 3))
    check_grad(lambda x: (x @ Tensor(other)).sum(), (2, 3, 4), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_reshape_permute_concat(seed):
    def build(x):
        a = T.narrow(x, 0, 0, 2)
        b = T.narrow(x, 0, 2, 2)
        joined = T.concat([b, a], axis=0)
        return T.permute(joined.reshape(2, 2, 3), (1, 0, 2)).sum()

    check_grad(build, (4, 3), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcast_mul_add(seed):
    rng = np.random.default_rng(seed + 300)
    other = rng.normal(size=(1, 4, 4))
    check_grad(lambda x: (x * Tensor(other) + Tensor(other)).sum(), (3, 4, 4), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d(seed):
    rng = np.random.default_rng(seed + 400)
    w = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=2)
    check_grad(lambda x: ops.conv2d(x, Tensor(w), Tensor(b), stride=1, padding=1).sum(), (2, 5, 5), seed)
    check_grad(lambda x: ops.conv2d(x, Tensor(w), None, stride=2, padding=1).sum(), (2, 6, 6), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_weight_and_bias(seed):
    rng = np.random.default_rng(seed + 500)
    x = rng.normal(size=(2, 5, 5))
    bias = rng.normal(size=3)

    def via_weight(w):
        return ops.conv2d(Tensor(x), w.reshape(3, 2, 3, 3), Tensor(bias), padding=1).sum()

    check_grad(via_weight, (3 * 2 * 3 * 3,), seed)

    w = rng.normal(size=(3, 2, 3, 3))
    check_grad(lambda b: ops.conv2d(Tensor(x), Tensor(w), b, padding=1).sum(), (3,), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_conv2d(seed):
    rng = np.random.default_rng(seed + 600)
    w = rng.normal(size=(3, 1, 5, 5))
    check_grad(lambda x: ops.depthwise_conv2d(x, Tensor(w)).sum(), (3, 6, 6), seed)
    x = rng.normal(size=(3, 6, 6))
    check_grad(lambda w_: ops.depthwise_conv2d(Tensor(x), w_.reshape(3, 1, 5, 5)).sum(), (3 * 25,), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_pointwise_conv2d(seed):
    rng = np.random.default_rng(seed + 700)
    w = rng.normal(size=(4, 3, 1, 1))
    check_grad(lambda x: ops.pointwise_conv2d(x, Tensor(w)).sum(), (3, 4, 4), seed)
    x = rng.normal(size=(3, 4, 4))
    check_grad(lambda w_: ops.pointwise_conv2d(Tensor(x), w_.reshape(4, 3, 1, 1)).sum(), (12,), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear(seed):
    rng = np.random.default_rng(seed + 800)
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    check_grad(lambda x: ops.linear(x, Tensor(w), Tensor(b)).sum(), (5, 4), seed)
    x = rng.normal(size=(5, 4))
    check_grad(lambda w_: ops.linear(Tensor(x), w_.reshape(4, 3), Tensor(b)).sum(), (12,), seed)
    w2 = rng.normal(size=(4, 3))
    check_grad(lambda b_: ops.linear(Tensor(x), Tensor(w2), b_).sum(), (3,), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax(seed):
    rng = np.random.default_rng(seed + 900)
    probe = rng.normal(size=(3, 5))
    check_grad(lambda x: (ops.softmax(x, axis=-1) * Tensor(probe)).sum(), (3, 5), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm(seed):
    rng = np.random.default_rng(seed + 1000)
    gain = rng.uniform(0.5, 1.5, size=4)
    shift = rng.normal(size=4)
    probe = rng.normal(size=(3, 4))

    def build(x):
        return (ops.layer_norm(x, Tensor(gain), Tensor(shift)) * Tensor(probe)).sum()

    check_grad(build, (3, 4), seed)
    x = rng.normal(size=(3, 4))
    check_grad(lambda g: (ops.layer_norm(Tensor(x), g, Tensor(shift)) * Tensor(probe)).sum(), (4,), seed)
    check_grad(lambda s: (ops.layer_norm(Tensor(x), Tensor(gain), s) * Tensor(probe)).sum(), (4,), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_bilinear_upsample(seed):
    rng = np.random.default_rng(seed + 1100)
    probe = rng.normal(size=(2, 8, 6))
    check_grad(lambda x: (ops.bilinear_upsample(x, 2) * Tensor(probe)).sum(), (2, 4, 3), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_pipeline(seed):
    """conv -> norm -> softmax -> sum, the layered sanity case."""
    rng = np.random.default_rng(seed + 1200)
    w = rng.normal(size=(2, 2, 3, 3)) * 0.5
    gain = rng.uniform(0.5, 1.5, size=2)
    shift = rng.normal(size=2) * 0.1
    probe = rng.normal(size=(16, 2))

    def build(x):
        y = ops.conv2d(x, Tensor(w), stride=1, padding=1)
        tokens = T.permute(y.reshape(2, 16), (1, 0))
        normed = ops.layer_norm(tokens, Tensor(gain), Tensor(shift))
        return (ops.softmax(normed, axis=-1) * Tensor(probe)).sum()

    check_grad(build, (2, 4, 4), seed)


def test_oracle_on_analytic_cases():
    with precision(64):
        grad = finite_difference_gradient(lambda t: t.sum(), Tensor(np.array([1.0, -2.0, 3.0])))
        np.testing.assert_allclose(grad, 1.0, atol=1e-9)
        grad = finite_difference_gradient(lambda t: (t * t).sum(), Tensor(np.array([3.0])))
        np.testing.assert_allclose(grad, [6.0], atol=1e-6)
