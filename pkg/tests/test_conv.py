import numpy as np
import pytest

from mscaps.conv import conv1d_channels, conv1x1, conv2d, conv2d_reference, global_avg_pool
from mscaps.rng import make_rng
from mscaps.tensor import Tensor, TensorError


def _conv(x, k, b, dilation=1, padding="same"):
    return conv2d(Tensor(x), Tensor(k), Tensor(b), dilation, padding).data


class TestConv2d:
    def test_scalar_multiply(self):
        out = _conv(np.array([[[5.0]]]), np.array([[[[2.0]]]]), np.array([0.0]))
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 10.0

    @pytest.mark.parametrize("dilation", [1, 2, 3])
    def test_constant_input_interior_is_value_times_weight_sum(self, dilation):
        v = 1.5
        kernel = make_rng(1).normal(size=(3, 3, 1, 1))
        out = _conv(np.full((15, 15, 1), v), kernel, np.zeros(1), dilation)
        pad = dilation
        interior = out[pad:-pad, pad:-pad, 0]
        np.testing.assert_allclose(interior, v * kernel.sum(), rtol=1e-13)

    def test_dilation_does_not_change_constant_interior(self):
        kernel = make_rng(2).normal(size=(3, 3, 2, 3))
        x = np.full((13, 13, 2), 0.7)
        a = _conv(x, kernel, np.zeros(3), 1)[3:-3, 3:-3]
        b = _conv(x, kernel, np.zeros(3), 3)[3:-3, 3:-3]
        np.testing.assert_allclose(a, b, rtol=1e-13)

    @pytest.mark.parametrize("hot, tap", [((2, 2), (1, 1)), ((0, 4), (0, 2)), ((4, 0), (2, 0)), ((2, 4), (1, 2))])
    def test_one_hot_dilated_valid_picks_aligned_tap(self, hot, tap):
        x = np.zeros((5, 5, 1))
        x[hot + (0,)] = 1.0
        kernel = np.arange(1.0, 10.0).reshape(3, 3, 1, 1)
        out = _conv(x, kernel, np.zeros(1), dilation=2, padding="valid")
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == kernel[tap + (0, 0)]
        assert conv2d_reference(x, kernel, np.zeros(1), 2, "valid")[0, 0, 0] == kernel[tap + (0, 0)]

    @pytest.mark.parametrize("k, dilation, padding", [(3, 1, "same"), (3, 2, "same"), (3, 3, "same"), (5, 1, "valid"), (3, 2, "valid")])
    def test_im2col_agrees_with_naive_loops(self, k, dilation, padding):
        rng = make_rng(3)
        x, kernel, bias = rng.normal(size=(9, 8, 3)), rng.normal(size=(k, k, 3, 4)), rng.normal(size=4)
        np.testing.assert_allclose(_conv(x, kernel, bias, dilation, padding), conv2d_reference(x, kernel, bias, dilation, padding), rtol=0, atol=1e-10)

    def test_batched_equals_per_image(self):
        rng = make_rng(4)
        x, kernel, bias = rng.normal(size=(3, 7, 7, 2)), rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)
        batched = _conv(x, kernel, bias, 2)
        for i in range(3):
            np.testing.assert_allclose(batched[i], _conv(x[i], kernel, bias, 2), rtol=0, atol=1e-14)

    def test_output_sizes(self):
        x = np.zeros((9, 9, 1))
        assert _conv(x, np.zeros((3, 3, 1, 2)), np.zeros(2), 3, "same").shape == (9, 9, 2)
        assert _conv(x, np.zeros((5, 5, 1, 2)), np.zeros(2), 1, "valid").shape == (5, 5, 2)
        assert _conv(x, np.zeros((3, 3, 1, 2)), np.zeros(2), 2, "valid").shape == (5, 5, 2)

    def test_channel_mismatch(self):
        with pytest.raises(TensorError):
            _conv(np.zeros((5, 5, 2)), np.zeros((3, 3, 1, 1)), np.zeros(1))

    def test_kernel_too_large_for_valid(self):
        with pytest.raises(TensorError):
            _conv(np.zeros((5, 5, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1), dilation=3, padding="valid")

    def test_even_kernel_rejected(self):
        with pytest.raises(TensorError):
            _conv(np.zeros((5, 5, 1)), np.zeros((2, 2, 1, 1)), np.zeros(1))


class TestConv1x1:
    def test_identity(self):
        x = make_rng(5).normal(size=(4, 4, 3))
        np.testing.assert_array_equal(conv1x1(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)

    def test_ones_kernel_sums_channels(self):
        x = make_rng(6).normal(size=(4, 4, 3))
        out = conv1x1(Tensor(x), Tensor(np.ones((3, 2))), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out[..., 0], x.sum(-1), rtol=1e-14)
        np.testing.assert_allclose(out[..., 1], x.sum(-1), rtol=1e-14)

    def test_matches_per_pixel_oracle(self):
        rng = make_rng(7)
        x, k, b = rng.normal(size=(4, 4, 2)), rng.normal(size=(2, 3)), rng.normal(size=3)
        expected = np.zeros((4, 4, 3))
        for i in range(4):
            for j in range(4):
                for co in range(3):
                    expected[i, j, co] = b[co] + sum(x[i, j, ci] * k[ci, co] for ci in range(2))
        np.testing.assert_allclose(conv1x1(Tensor(x), Tensor(k), Tensor(b)).data, expected, rtol=0, atol=1e-13)

    def test_channel_mismatch(self):
        with pytest.raises(TensorError):
            conv1x1(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((2, 2))))


class TestGlobalAvgPool:
    def test_constant(self):
        assert global_avg_pool(Tensor(np.full((3, 5, 2), 4.0))).data.tolist() == [[[4.0, 4.0]]]

    def test_two_by_two(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1)
        assert global_avg_pool(Tensor(x)).data[0, 0, 0] == 2.5

    def test_random_matches_summation(self):
        x = make_rng(8).normal(size=(7, 5, 3))
        out = global_avg_pool(Tensor(x)).data
        assert out.shape == (1, 1, 3)
        for c in range(3):
            acc = 0.0
            for i in range(7):
                for j in range(5):
                    acc += x[i, j, c]
            assert abs(out[0, 0, c] - acc / 35) < 1e-12


class TestConv1dChannels:
    def test_unit_kernel_identity(self):
        x = make_rng(9).normal(size=(1, 1, 5))
        np.testing.assert_array_equal(conv1d_channels(Tensor(x), Tensor([1.0])).data, x)

    def test_centered_unit_kernel_identity(self):
        x = make_rng(10).normal(size=(1, 1, 5))
        np.testing.assert_array_equal(conv1d_channels(Tensor(x), Tensor([0.0, 1.0, 0.0])).data, x)

    def test_ramp_sliding_sum(self):
        ramp = np.arange(1.0, 6.0)
        out = conv1d_channels(Tensor(ramp.reshape(1, 1, 5)), Tensor([1.0, 1.0, 1.0])).data.reshape(-1)
        padded = np.concatenate([[0.0], ramp, [0.0]])
        expected = [padded[i] + padded[i + 1] + padded[i + 2] for i in range(5)]
        np.testing.assert_array_equal(out, expected)
        np.testing.assert_array_equal(out, [3.0, 6.0, 9.0, 12.0, 9.0])

    def test_even_kernel_rejected(self):
        with pytest.raises(TensorError):
            conv1d_channels(Tensor(np.ones((1, 1, 4))), Tensor([1.0, 1.0]))
