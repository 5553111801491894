"""Forward-value checks for the tensor core, frozen against hand oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from buildseg import ops
from buildseg.tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    concat,
    narrow,
    no_grad,
    precision,
)


def conv_reference(x, w, b=None, stride=1, padding=0):
    """Nested-loop cross-correlation, the independent oracle for conv2d."""
    c_in, h, win = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (win + 2 * padding - kw) // stride + 1
    y = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                y[o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return y


class TestConv2d:
    def test_ones_kernel_center_and_corners(self):
        x = Tensor(np.ones((1, 4, 4)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, stride=1, padding=1).numpy()
        assert out[0, 1, 1] == pytest.approx(9.0)
        assert out[0, 2, 2] == pytest.approx(9.0)
        for r, c in [(0, 0), (0, 3), (3, 0), (3, 3)]:
            assert out[0, r, c] == pytest.approx(4.0)

    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 6, 5))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).numpy()
        np.testing.assert_array_equal(out, x.astype(out.dtype))

    def test_strided_shape(self):
        x = Tensor(np.zeros((3, 512, 512), dtype=np.float32))
        w = Tensor(np.zeros((64, 3, 3, 3), dtype=np.float32))
        assert ops.conv2d(x, w, stride=2, padding=1).shape == (64, 256, 256)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 7, 6))
        w = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).numpy()
            want = conv_reference(x, w, b, stride=stride, padding=padding)
            np.testing.assert_allclose(got, want, rtol=1e-5)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ShapeError, match="axis 0"):
            ops.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected_except_stem(self):
        x = Tensor(np.zeros((1, 8, 8)))
        with pytest.raises(ConfigError):
            ops.conv2d(x, Tensor(np.zeros((1, 1, 4, 4))))
        out = ops.conv2d(x, Tensor(np.zeros((1, 1, 2, 2))), stride=2)
        assert out.shape == (1, 4, 4)


class TestDepthwiseConv2d:
    def test_delta_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 5, 5))
        w = np.zeros((4, 1, 3, 3))
        w[:, 0, 1, 1] = 1.0
        out = ops.depthwise_conv2d(Tensor(x), Tensor(w)).numpy()
        np.testing.assert_array_equal(out, x.astype(out.dtype))

    def test_large_kernel_preserves_size(self):
        out = ops.depthwise_conv2d(Tensor(np.zeros((16, 8, 8))), Tensor(np.zeros((16, 1, 9, 9))), padding=4)
        assert out.shape == (16, 8, 8)

    def test_all_ones_small_case(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.depthwise_conv2d(x, w, padding=1).numpy()
        np.testing.assert_allclose(out, [[[10.0, 10.0], [10.0, 10.0]]])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ops.depthwise_conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 1, 4, 4))))

    def test_channels_do_not_mix(self):
        x = np.zeros((2, 3, 3))
        x[0] = 1.0
        w = np.ones((2, 1, 3, 3))
        out = ops.depthwise_conv2d(Tensor(x), Tensor(w)).numpy()
        assert out[1].sum() == 0.0
        assert out[0].sum() > 0.0


class TestPointwiseConv2d:
    def test_identity_weights(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4, 4))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = ops.pointwise_conv2d(Tensor(x), Tensor(w)).numpy()
        np.testing.assert_array_equal(out, x.astype(out.dtype))

    def test_channel_sum(self):
        x = np.stack([np.full((2, 2), 1.5), np.full((2, 2), 2.5)])
        w = np.ones((1, 2, 1, 1))
        out = ops.pointwise_conv2d(Tensor(x), Tensor(w)).numpy()
        np.testing.assert_allclose(out, np.full((1, 2, 2), 4.0))

    def test_matches_per_pixel_matmul(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4, 5))
        w = rng.normal(size=(5, 3, 1, 1))
        got = ops.pointwise_conv2d(Tensor(x), Tensor(w)).numpy()
        for i in range(4):
            for j in range(5):
                np.testing.assert_allclose(got[:, i, j], w[:, :, 0, 0] @ x[:, i, j], rtol=1e-5)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            ops.pointwise_conv2d(Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((4, 2, 1, 1))))


class TestLinear:
    def test_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out = ops.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).numpy()
        np.testing.assert_array_equal(out, x.astype(out.dtype))

    def test_dot_product_oracle(self):
        x = np.array([[1.0, 2.0, 3.0]])
        w = np.array([[1.0], [0.5], [-1.0]])
        b = np.array([0.25])
        out = ops.linear(Tensor(x), Tensor(w), Tensor(b)).numpy()
        assert out[0, 0] == pytest.approx(1.0 + 1.0 - 3.0 + 0.25)

    def test_stage_width(self):
        out = ops.linear(Tensor(np.zeros((7, 256))), Tensor(np.zeros((256, 256))), Tensor(np.zeros(256)))
        assert out.shape == (7, 256)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError, match="inner-dimension"):
            ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_uniform_logits(self):
        out = ops.softmax(Tensor(np.zeros((2, 5)))).numpy()
        np.testing.assert_allclose(out, 0.2)

    def test_closed_form(self):
        out = ops.softmax(Tensor(np.array([0.0, np.log(3.0)]))).numpy()
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-7)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 6))
        a = ops.softmax(Tensor(x)).numpy()
        b = ops.softmax(Tensor(x + 123.456)).numpy()
        np.testing.assert_allclose(a, b, atol=1e-6)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_slices_sum_to_one(self, logits):
        out = ops.softmax(Tensor(np.array(logits))).numpy()
        assert abs(out.sum() - 1.0) < 1e-6
        assert np.all(out >= 0.0) and np.all(out <= 1.0)


class TestLayerNorm:
    def test_constant_input(self):
        x = Tensor(np.full((2, 4), 3.3))
        out = ops.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).numpy()
        np.testing.assert_allclose(out, 0.0, atol=1e-4)

    def test_two_point_case(self):
        with precision(64):
            out = ops.layer_norm(
                Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12
            ).numpy()
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)

    def test_per_position_moments_with_uniform_affine(self):
        rng = np.random.default_rng(5)
        x = rng.normal(loc=2.0, scale=3.0, size=(64, 8))
        gain, shift = 1.7, -0.4
        with precision(64):
            out = ops.layer_norm(
                Tensor(x), Tensor(np.full(8, gain)), Tensor(np.full(8, shift)), eps=1e-12
            ).numpy()
        np.testing.assert_allclose(out.mean(axis=-1), shift, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=-1), gain, atol=1e-4)

    def test_per_channel_moments_over_draws(self):
        rng = np.random.default_rng(5)
        x = rng.normal(loc=2.0, scale=3.0, size=(10_000, 8))
        gain = rng.uniform(0.5, 2.0, size=8)
        shift = rng.uniform(-1.0, 1.0, size=8)
        with precision(64):
            out = ops.layer_norm(Tensor(x), Tensor(gain), Tensor(shift)).numpy()
        np.testing.assert_allclose(out.mean(axis=0), shift, atol=0.1)
        np.testing.assert_allclose(out.std(axis=0), gain, rtol=0.05)


class TestBilinearUpsample:
    def test_constant_image(self):
        out = ops.bilinear_upsample(Tensor(np.full((2, 3, 3), 5.0)), 2).numpy()
        assert out.shape == (2, 6, 6)
        np.testing.assert_allclose(out, 5.0)

    def test_single_pixel(self):
        out = ops.bilinear_upsample(Tensor(np.array([[[7.0]]])), 2).numpy()
        np.testing.assert_allclose(out, np.full((1, 2, 2), 7.0))

    def test_column_ramp(self):
        x = Tensor(np.array([[[0.0, 1.0], [0.0, 1.0]]]))
        out = ops.bilinear_upsample(x, 2).numpy()
        np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)
        np.testing.assert_allclose(out[0], out[0, ::-1])  # rows identical

    def test_bad_factor(self):
        with pytest.raises(ConfigError):
            ops.bilinear_upsample(Tensor(np.zeros((1, 2, 2))), 0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_bounds_preserved(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 4))
        for factor in (2, 4):
            out = ops.bilinear_upsample(Tensor(x), factor).numpy()
            assert out.min() >= x.min() - 1e-6
            assert out.max() <= x.max() + 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_sum(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_double_backward_rejected(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        loss = x.sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_detached_graph_rejected(self):
        x = Tensor(np.array([1.0]))
        with pytest.raises(RuntimeError):
            x.sum().backward()

    def test_fanout_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * 2.0
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [4.0])

    def test_zero_grad_resets(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        x.sum().backward()
        x.zero_grad()
        assert x.grad is None
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0, 3.0])

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with no_grad():
            y = x * 5.0
        assert not y.requires_grad


class TestShapeOps:
    def test_concat_narrow_roundtrip(self):
        rng = np.random.default_rng(6)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        joined = concat([a, b], axis=0)
        back = narrow(joined, 0, 0, 2)
        np.testing.assert_array_equal(back.numpy(), a.numpy())
        back.sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.zeros((4, 3)))

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            narrow(Tensor(np.zeros((3, 3))), 0, 2, 5)

    def test_matmul_stacked(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(4, 2, 3))
        b = rng.normal(size=(4, 3, 5))
        out = (Tensor(a) @ Tensor(b)).numpy()
        np.testing.assert_allclose(out, a @ b, rtol=1e-5)
