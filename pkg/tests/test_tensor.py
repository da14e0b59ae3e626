import numpy as np
import pytest

import tensor as T
from errors import ConfigurationError, DimensionError, NumericError, UsageError
from tensor import Tape, Tensor, backward


def _loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def _loop_conv2d(x, kernels, stride, pad):
    batch, channels, height, width = x.shape
    out_channels, _, k, _ = kernels.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = (height + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1
    out = np.zeros((batch, out_channels, out_h, out_w))
    for b in range(batch):
        for o in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    patch = padded[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, o, i, j] = (patch * kernels[o]).sum()
    return out


def _loop_max_pool(x, size, stride, pad):
    batch, channels, height, width = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    out_h = (height + 2 * pad - size) // stride + 1
    out_w = (width + 2 * pad - size) // stride + 1
    out = np.zeros((batch, channels, out_h, out_w))
    for b in range(batch):
        for c in range(channels):
            for i in range(out_h):
                for j in range(out_w):
                    window = padded[b, c, i * stride : i * stride + size, j * stride : j * stride + size]
                    out[b, c, i, j] = window.max()
    return out


class TestTensor:
    def test_data_is_float64(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)
        assert t.size == 4

    def test_operators_dispatch_to_ops(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4.0, 7.0])
        np.testing.assert_array_equal((b - a).data, [2.0, 3.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 10.0])
        np.testing.assert_array_equal((2 * a).data, [2.0, 4.0])
        np.testing.assert_array_equal((-a).data, [-1.0, -2.0])


class TestTape:
    def test_nothing_recorded_without_requires_grad(self):
        with Tape() as tape:
            T.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 0

    def test_nothing_recorded_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.scale(x, 2.0)
        assert y.is_leaf
        assert T.current_tape() is None

    def test_nested_tapes_record_on_innermost(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as outer:
            with Tape() as inner:
                T.scale(x, 3.0)
            T.scale(x, 2.0)
        assert len(inner) == 1
        assert len(outer) == 1


class TestBackward:
    def test_simple_chain(self):
        x = Tensor([2.0, -1.0], requires_grad=True)
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [4.0, -2.0])

    def test_shared_subexpression_accumulates(self):
        x = Tensor([1.5], requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 3.0)
            loss = T.reduce_sum(T.add(y, y))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = T.reduce_sum(T.scale(x, 2.0))
            backward(loss, tape)
        np.testing.assert_allclose(x.grad, [4.0])
        T.zero_grad([x])
        assert x.grad is None

    def test_broadcast_gradient_is_summed(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        bias = Tensor(np.zeros(4), requires_grad=True)
        with Tape() as tape:
            loss = T.reduce_sum(T.add(x, bias))
        backward(loss, tape)
        np.testing.assert_allclose(bias.grad, np.full(4, 3.0))

    def test_non_scalar_loss_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(UsageError):
            backward(y, tape)

    def test_loss_off_tape_raises(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.reduce_sum(x)
        with pytest.raises(UsageError):
            backward(loss, Tape())

    def test_constants_receive_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        c = Tensor([5.0])
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(x, c))
        backward(loss, tape)
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [5.0])


class TestMatmul:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, _loop_matmul(a, b))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_rejects_batched_input(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((2, 2))))


class TestConv2d:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 3)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.standard_normal((2, 3, 9, 8))
        kernels = rng.standard_normal((4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(kernels), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, _loop_conv2d(x, kernels, stride, pad), atol=1e-12)

    def test_output_extent(self):
        out = T.conv2d(Tensor(np.zeros((1, 3, 224, 224))), Tensor(np.zeros((2, 3, 7, 7))), 2, 3)
        assert out.shape == (1, 2, 112, 112)

    def test_channel_mismatch_raises(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_zero_kernels_give_zero_output(self):
        x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 6, 6)))
        out = T.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), pad=1)
        np.testing.assert_array_equal(out.data, 0.0)


class TestMaxPool2d:
    def test_matches_loop_oracle(self):
        x = np.random.default_rng(3).standard_normal((2, 3, 9, 10))
        out = T.max_pool2d(Tensor(x))
        np.testing.assert_array_equal(out.data, _loop_max_pool(x, 3, 2, 1))

    def test_gradient_routes_to_window_maximum(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4), requires_grad=True)
        with Tape() as tape:
            loss = T.reduce_sum(T.max_pool2d(x, size=2, stride=2, pad=0))
        backward(loss, tape)
        expected = np.zeros((4, 4))
        expected[[1, 1, 3, 3], [1, 3, 1, 3]] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    def test_ties_route_to_first_maximum(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.reduce_sum(T.max_pool2d(x, size=2, stride=2, pad=0))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


class TestSoftmax:
    def test_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(4).standard_normal((5, 7)) * 50)
        np.testing.assert_allclose(T.softmax(x).data.sum(axis=1), 1.0)

    def test_entries_are_probabilities(self):
        x = Tensor(np.random.default_rng(8).standard_normal((200, 6)) * 10)
        out = T.softmax(x).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-10)
        assert np.all(out > 0.0) and np.all(out <= 1.0)

    def test_single_class_is_one(self):
        np.testing.assert_array_equal(T.softmax(Tensor([[-3.5], [42.0]])).data, [[1.0], [1.0]])

    def test_stable_for_large_inputs(self):
        out = T.softmax(Tensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_rejects_non_finite_input(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor([[np.nan, 1.0]]))


class TestBatchNorm:
    def _params(self, channels):
        return Tensor(np.ones(channels)), Tensor(np.zeros(channels)), np.zeros(channels), np.ones(channels)

    def test_train_mode_normalizes_per_channel(self):
        x = Tensor(np.random.default_rng(5).standard_normal((4, 3, 5, 5)) * 3 + 2)
        gamma, beta, mean, var = self._params(3)
        out = T.batch_norm(x, gamma, beta, mean, var, "train")
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_standardized_batch_passes_through(self):
        raw = np.random.default_rng(9).standard_normal((8, 3))
        x = (raw - raw.mean(axis=0)) / raw.std(axis=0)
        gamma, beta, mean, var = self._params(3)
        out = T.batch_norm(Tensor(x), gamma, beta, mean, var, "train", eps=0.0)
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        x = Tensor(np.random.default_rng(10).standard_normal((4, 2)))
        _, _, mean, var = self._params(2)
        out = T.batch_norm(x, Tensor(np.zeros(2)), Tensor([0.5, -2.0]), mean, var, "train")
        np.testing.assert_allclose(out.data, np.tile([0.5, -2.0], (4, 1)), atol=1e-12)

    def test_train_mode_updates_running_stats(self):
        data = np.array([[1.0], [3.0]])
        gamma, beta, mean, var = self._params(1)
        T.batch_norm(Tensor(data), gamma, beta, mean, var, "train")
        np.testing.assert_allclose(mean, [0.2])
        # unbiased batch variance is 2.0
        np.testing.assert_allclose(var, [0.9 + 0.1 * 2.0])

    def test_eval_mode_uses_running_stats(self):
        gamma, beta, mean, var = self._params(2)
        mean[:] = [1.0, -1.0]
        var[:] = [4.0, 1.0]
        out = T.batch_norm(Tensor([[3.0, 0.0]]), gamma, beta, mean, var, "eval", eps=0.0)
        np.testing.assert_allclose(out.data, [[1.0, 1.0]])

    def test_single_sample_train_raises(self):
        gamma, beta, mean, var = self._params(2)
        with pytest.raises(ConfigurationError):
            T.batch_norm(Tensor(np.zeros((1, 2))), gamma, beta, mean, var, "train")

    def test_unknown_mode_raises(self):
        gamma, beta, mean, var = self._params(2)
        with pytest.raises(ConfigurationError):
            T.batch_norm(Tensor(np.zeros((2, 2))), gamma, beta, mean, var, "infer")


class TestShapeOps:
    def test_concat_then_split_is_exact(self):
        rng = np.random.default_rng(6)
        a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 5)))
        left, right = T.split(T.concat([a, b], axis=1), [3, 5], axis=1)
        np.testing.assert_array_equal(left.data, a.data)
        np.testing.assert_array_equal(right.data, b.data)

    def test_split_sizes_must_cover_axis(self):
        with pytest.raises(DimensionError):
            T.split(Tensor(np.zeros((2, 4))), [1, 2], axis=1)

    def test_reshape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            T.reshape(Tensor(np.zeros(6)), (4, 2))

    def test_global_avg_pool(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        np.testing.assert_allclose(T.global_avg_pool(x).data, [[1.5, 5.5]])

    def test_outer_product_layout(self):
        out = T.outer_product(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0, 5.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]])

    def test_mean_over_axes(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(T.mean(x, axis=1).data, [1.0, 4.0])
        assert T.mean(x).item() == pytest.approx(2.5)
