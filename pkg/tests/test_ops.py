"""Forward-value oracles and shape contracts for the operator set."""

import numpy as np
import pytest

from cascn import ops
from cascn.errors import ContractError, DimensionError
from cascn.tensor import Tape, Tensor, backward


def delta_kernel(channels_out, channels_in, k):
    w = np.zeros((channels_out, channels_in, k, k))
    for m in range(channels_out):
        w[m, m % channels_in, k // 2, k // 2] = 1.0
    return w


class TestConv2d:
    def test_all_ones_hand_sums(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 1] == 6.0

    def test_delta_kernel_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = Tensor(delta_kernel(3, 3, 3))
        out = ops.conv2d(x, w, padding=1)
        assert np.array_equal(out.data, x.data)

    def test_dilated_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 5, 5)))
        w = Tensor(rng.normal(size=(1, 1, 3, 3)))
        assert ops.conv2d(x, w, dilation=2).shape == (1, 1, 1, 1)

    def test_output_shape_formula(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 11, 9)))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)))
        for stride, pad, dil in [(1, 1, 1), (2, 1, 1), (2, 2, 2), (3, 0, 1)]:
            got = ops.conv2d(x, w, stride=stride, padding=pad, dilation=dil)
            expect_h = (11 + 2 * pad - dil * 2 - 1) // stride + 1
            expect_w = (9 + 2 * pad - dil * 2 - 1) // stride + 1
            assert got.shape == (1, 4, expect_h, expect_w)

    def test_channel_mismatch_names_axis(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 5, 5)))
        w = Tensor(rng.normal(size=(2, 4, 3, 3)))
        with pytest.raises(DimensionError, match="channel"):
            ops.conv2d(x, w)

    def test_kernel_larger_than_padded_input(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 3, 3)))
        w = Tensor(rng.normal(size=(1, 1, 3, 3)))
        with pytest.raises(DimensionError, match="extent"):
            ops.conv2d(x, w, dilation=2)

    def test_even_kernel_rejected(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        with pytest.raises(ContractError):
            ops.conv2d(x, Tensor(rng.normal(size=(1, 1, 2, 2))))

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        fast = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2,
                          padding=1).data
        slow = ops.conv2d_direct(x, w, b, stride=2, padding=1)
        assert np.abs(fast - slow).max() < 1e-12


class TestDepthwise:
    def test_delta_kernels_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        w = np.zeros((4, 1, 3, 3))
        w[:, 0, 1, 1] = 1.0
        out = ops.depthwise_conv2d(x, Tensor(w), padding=1)
        assert np.array_equal(out.data, x.data)

    def test_channel_independence(self, rng):
        x = rng.normal(size=(1, 3, 5, 5))
        x[:, 0] = 0.0
        w = Tensor(rng.normal(size=(3, 1, 3, 3)))
        out = ops.depthwise_conv2d(Tensor(x), w, padding=1)
        assert np.all(out.data[:, 0] == 0.0)
        # other channels unaffected by zeroing channel 0
        x2 = x.copy()
        x2[:, 0] = rng.normal(size=(5, 5))
        out2 = ops.depthwise_conv2d(Tensor(x2), w, padding=1)
        assert np.array_equal(out.data[:, 1:], out2.data[:, 1:])

    def test_box_sum_equals_block_diagonal_standard_conv(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        w_dw = np.ones((2, 1, 3, 3))
        got = ops.depthwise_conv2d(Tensor(x), Tensor(w_dw), padding=1).data
        # grouped oracle: block-diagonal standard kernel
        w_std = np.zeros((2, 2, 3, 3))
        w_std[0, 0] = w_dw[0, 0]
        w_std[1, 1] = w_dw[1, 0]
        want = ops.conv2d(Tensor(x), Tensor(w_std), padding=1).data
        assert np.abs(got - want).max() < 1e-12

    def test_wrong_channel_count(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 5, 5)))
        with pytest.raises(DimensionError, match="channel"):
            ops.depthwise_conv2d(x, Tensor(rng.normal(size=(2, 1, 3, 3))))


class TestPointwise:
    def test_identity_weights(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        assert np.array_equal(ops.pointwise_conv(x, w).data, x.data)

    def test_equals_conv2d_k1(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = Tensor(rng.normal(size=(4, 3, 1, 1)))
        b = Tensor(rng.normal(size=(4,)))
        diff = np.abs(ops.pointwise_conv(x, w, b).data
                      - ops.conv2d(x, w, b).data).max()
        assert diff < 1e-12

    def test_sum_and_difference_rows(self):
        x = np.zeros((1, 2, 2, 2))
        x[0, 0] = [[1.0, 2.0], [3.0, 4.0]]   # a
        x[0, 1] = [[5.0, 6.0], [7.0, 8.0]]   # b
        w = Tensor(np.array([[1.0, 1.0], [1.0, -1.0]]).reshape(2, 2, 1, 1))
        out = ops.pointwise_conv(Tensor(x), w).data
        assert np.array_equal(out[0, 0], x[0, 0] + x[0, 1])
        assert np.array_equal(out[0, 1], x[0, 0] - x[0, 1])


class TestTransposedConv:
    def test_single_tap_scatter(self):
        x = Tensor(np.array([[[[3.5]]]]))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = ops.transposed_conv2d(x, w)
        assert out.shape == (1, 1, 2, 2)
        assert np.all(out.data == 3.5)

    def test_doubles_spatial_dims(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 7)))
        w = Tensor(rng.normal(size=(3, 4, 2, 2)))
        assert ops.transposed_conv2d(x, w).shape == (2, 4, 10, 14)

    def test_zero_input_zero_output(self, rng):
        x = Tensor(np.zeros((1, 2, 3, 3)))
        w = Tensor(rng.normal(size=(2, 2, 2, 2)))
        assert np.all(ops.transposed_conv2d(x, w).data == 0.0)

    def test_adjoint_identity(self, rng):
        w = rng.normal(size=(3, 2, 2, 2))
        x = rng.normal(size=(1, 3, 4, 5))
        y = rng.normal(size=(1, 2, 8, 10))
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            out = ops.transposed_conv2d(xt, Tensor(w))
            s = (out * Tensor(y)).sum()
        gx = backward(tape, s)[xt]
        lhs = float((out.data * y).sum())
        rhs = float((x * gx).sum())
        assert abs(lhs - rhs) / max(abs(lhs), 1e-12) < 1e-10

    def test_input_gradient_equals_forward_conv(self, rng):
        # backward w.r.t. input is a stride-2 convolution with the kernel
        x = rng.normal(size=(1, 2, 3, 4))
        w = rng.normal(size=(2, 3, 2, 2))
        g = rng.normal(size=(1, 3, 6, 8))
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            s = (ops.transposed_conv2d(xt, Tensor(w)) * Tensor(g)).sum()
        gx = backward(tape, s)[xt]
        want = np.einsum("nmhawb,cmab->nchw", g.reshape(1, 3, 3, 2, 4, 2), w)
        assert np.allclose(gx, want, atol=1e-12)


class TestPooling:
    def test_constant_input(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.3))
        assert np.all(ops.maxpool2d(x).data == 3.3)
        assert np.all(ops.avgpool2d(x).data == 3.3)

    def test_block_arithmetic(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert ops.maxpool2d(x).data.item() == 4.0
        assert ops.avgpool2d(x).data.item() == 2.5

    def test_tie_routes_to_first(self):
        x = Tensor(np.array([[[[5.0, 5.0], [0.0, 0.0]]]]), requires_grad=True)
        with Tape() as tape:
            s = ops.maxpool2d(x).sum()
        g = backward(tape, s)[x]
        assert g.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_odd_dims_rejected(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 5, 4)))
        with pytest.raises(DimensionError):
            ops.maxpool2d(x)
        with pytest.raises(DimensionError):
            ops.avgpool2d(x)

    def test_avgpool_gradient_uniform(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        with Tape() as tape:
            s = ops.avgpool2d(x).sum()
        g = backward(tape, s)[x]
        assert np.all(g == 0.25)


class TestGlobalPooling:
    def test_constant_channel(self):
        x = Tensor(np.full((2, 3, 4, 5), 1.25))
        assert np.all(ops.global_avg_pool(x).data == 1.25)
        assert np.all(ops.global_max_pool(x).data == 1.25)

    def test_channel_values(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert ops.global_avg_pool(x).data.item() == 2.5
        assert ops.global_max_pool(x).data.item() == 4.0

    def test_single_pixel(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 1, 1)))
        assert np.array_equal(ops.global_avg_pool(x).data, x.data[:, :, 0, 0])
        assert np.array_equal(ops.global_max_pool(x).data, x.data[:, :, 0, 0])


class TestConv1dChannels:
    def test_identity_kernel(self, rng):
        v = Tensor(rng.normal(size=(2, 6)))
        out = ops.conv1d_channels(v, Tensor(np.array([0.0, 1.0, 0.0])))
        assert np.array_equal(out.data, v.data)

    def test_padded_sliding_sum(self):
        v = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
        out = ops.conv1d_channels(v, Tensor(np.array([1.0, 1.0, 1.0])))
        assert out.data.tolist() == [[3.0, 6.0, 9.0, 7.0]]

    def test_zero_weights(self, rng):
        v = Tensor(rng.normal(size=(3, 5)))
        out = ops.conv1d_channels(v, Tensor(np.zeros(3)))
        assert np.all(out.data == 0.0)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ContractError):
            ops.conv1d_channels(Tensor(np.zeros((1, 4))), Tensor(np.zeros(2)))


class TestBatchNorm:
    def test_standardized_input_unchanged(self, rng):
        x = rng.normal(size=(4, 2, 8, 8))
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                              True, np.zeros(2), np.ones(2))
        assert np.abs(out.data - x).max() < 1e-4

    def test_constant_input_maps_to_zero(self):
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        out = ops.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                              True, np.zeros(3), np.ones(3))
        assert np.all(out.data == 0.0)

    def test_two_value_batch_normalizes_to_unit(self):
        x = np.zeros((2, 1, 1, 1))
        x[0] = -1.0
        x[1] = 1.0
        out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                              True, np.zeros(1), np.ones(1))
        assert np.abs(out.data[0, 0, 0, 0] + 1.0) < 1e-5
        assert np.abs(out.data[1, 0, 0, 0] - 1.0) < 1e-5

    def test_eval_with_fresh_stats_is_affine_identity(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                              False, np.zeros(2), np.ones(2))
        assert np.abs(out.data - x / np.sqrt(1 + 1e-5)).max() < 1e-12

    def test_running_stats_update(self, rng):
        x = rng.normal(size=(8, 1, 4, 4)) * 2.0 + 5.0
        rm, rv = np.zeros(1), np.ones(1)
        ops.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                        True, rm, rv, momentum=0.1)
        assert np.isclose(rm[0], 0.1 * x.mean())
        assert np.isclose(rv[0], 0.9 + 0.1 * x.var())


class TestActivationsAndConcat:
    def test_sigmoid_at_zero(self):
        assert ops.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_relu_values(self):
        out = ops.relu(Tensor(np.array([-3.0, 3.0])))
        assert out.data.tolist() == [0.0, 3.0]

    def test_sigmoid_extremes_stay_finite(self):
        out = ops.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        assert np.all(np.isfinite(out))
        assert 0.0 <= out[0] < 1e-12 and 1.0 - 1e-12 < out[1] <= 1.0

    def test_concat_channel_additivity(self, rng):
        a = Tensor(rng.normal(size=(1, 64, 4, 4)))
        b = Tensor(rng.normal(size=(1, 32, 4, 4)))
        assert ops.concat_channels([a, b]).shape[1] == 96

    def test_concat_spatial_mismatch(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 4, 4)))
        b = Tensor(rng.normal(size=(1, 2, 5, 4)))
        with pytest.raises(DimensionError, match="spatial"):
            ops.concat_channels([a, b])

    def test_concat_backward_splits(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        cw = rng.normal(size=(1, 3, 3, 3))
        with Tape() as tape:
            s = (ops.concat_channels([a, b]) * Tensor(cw)).sum()
        grads = backward(tape, s)
        assert np.array_equal(grads[a], cw[:, :2])
        assert np.array_equal(grads[b], cw[:, 2:])


class TestScaleAndBroadcast:
    def test_scale_channels(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        s = rng.normal(size=(2, 3))
        out = ops.scale_channels(Tensor(x), Tensor(s))
        assert np.array_equal(out.data, x * s[:, :, None, None])

    def test_broadcast_spatial_constant(self, rng):
        x = rng.normal(size=(2, 3, 1, 1))
        out = ops.broadcast_spatial(Tensor(x), 4, 5)
        assert out.shape == (2, 3, 4, 5)
        assert np.all(out.data == x)
