import itertools
import unittest
import warnings

import numpy as np
import pytest

from tensor_engine import (
    EVAL,
    TRAIN,
    BatchNormState,
    BatchNormStateError,
    ConvSpec,
    GradTape,
    NonFiniteError,
    ShapeError,
    TapeError,
    Tensor,
    UnsupportedConfigError,
    add,
    backward,
    batch_norm,
    concat_channels,
    conv2d,
    conv2d_transposed,
    dropout,
    max_pool2,
    mse_loss,
    mul,
    prelu,
    sigmoid,
)


def naive_conv(x, w, b, dilation, padding, stride=1):
    """Loop-by-loop dilated cross-correlation used as the oracle."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span = dilation * (k - 1) + 1
    oh = (h + 2 * padding - span) // stride + 1
    ow = (wd + 2 * padding - span) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for ni, o, i, j in itertools.product(range(n), range(co), range(oh), range(ow)):
        acc = b[o]
        for ci, ki, kj in itertools.product(range(c), range(k), range(k)):
            acc += xp[ni, ci, i * stride + ki * dilation, j * stride + kj * dilation] * w[o, ci, ki, kj]
        out[ni, o, i, j] = acc
    return out


def f64(array):
    return Tensor(array, dtype=np.float64)


class TestConv2d(unittest.TestCase):

    def test_matches_naive_loop_on_small_grid(self):
        rng = np.random.default_rng(0)
        for h, w, cin, cout, d in itertools.product((3, 5, 8), (4, 7), (1, 3), (1, 2), (1, 2, 5)):
            spec = ConvSpec.same(cin, cout, dilation=d)
            x = rng.standard_normal((2, cin, h, w))
            weights = rng.standard_normal(spec.weight_shape)
            bias = rng.standard_normal(cout)
            got = conv2d(f64(x), f64(weights), f64(bias), spec).data
            want = naive_conv(x, weights, bias, d, d)
            self.assertEqual(got.shape, (2, cout, h, w))
            np.testing.assert_allclose(got, want, atol=1e-5, err_msg=f"h={h} w={w} cin={cin} cout={cout} d={d}")

    def test_stride_two_and_one_by_one(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 8, 8))
        strided = ConvSpec(2, 3, kernel=3, stride=2, padding=1)
        weights = rng.standard_normal(strided.weight_shape)
        bias = rng.standard_normal(3)
        got = conv2d(f64(x), f64(weights), f64(bias), strided).data
        np.testing.assert_allclose(got, naive_conv(x, weights, bias, 1, 1, stride=2), atol=1e-5)

        pointwise = ConvSpec(2, 4, kernel=1)
        weights = rng.standard_normal(pointwise.weight_shape)
        bias = np.zeros(4)
        got = conv2d(f64(x), f64(weights), f64(bias), pointwise).data
        np.testing.assert_allclose(got, np.einsum("oc,nchw->nohw", weights[:, :, 0, 0], x), atol=1e-10)

    def test_float32_by_default(self):
        spec = ConvSpec.same(1, 2)
        out = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones(spec.weight_shape)), Tensor(np.zeros(2)), spec)
        self.assertEqual(out.dtype, np.float32)

    def test_input_too_small_for_span(self):
        spec = ConvSpec(1, 1, kernel=3, dilation=5)
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones(spec.weight_shape)), Tensor(np.zeros(1)), spec)

    def test_channel_mismatch(self):
        spec = ConvSpec.same(3, 2)
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 6, 6))), Tensor(np.ones(spec.weight_shape)), Tensor(np.zeros(2)), spec)

    def test_non_finite_input(self):
        spec = ConvSpec.same(1, 1)
        x = np.ones((1, 1, 4, 4))
        x[0, 0, 1, 1] = np.nan
        with self.assertRaises(NonFiniteError):
            conv2d(Tensor(x), Tensor(np.ones(spec.weight_shape)), Tensor(np.zeros(1)), spec)


class TestConvTransposed(unittest.TestCase):

    def test_doubles_spatial_size(self):
        spec = ConvSpec(4, 2, kernel=2, stride=2, transposed=True)
        out = conv2d_transposed(Tensor(np.ones((3, 4, 5, 7))), Tensor(np.ones(spec.weight_shape)),
                                Tensor(np.zeros(2)), spec)
        self.assertEqual(out.shape, (3, 2, 10, 14))

    def test_is_adjoint_of_strided_conv(self):
        rng = np.random.default_rng(2)
        up = ConvSpec(3, 2, kernel=2, stride=2, transposed=True)
        down = ConvSpec(2, 3, kernel=2, stride=2)
        weights = rng.standard_normal(up.weight_shape)
        x = rng.standard_normal((2, 3, 4, 5))
        y = rng.standard_normal((2, 2, 8, 10))
        lhs = np.sum(conv2d_transposed(f64(x), f64(weights), f64(np.zeros(2)), up).data * y)
        rhs = np.sum(x * conv2d(f64(y), f64(weights), f64(np.zeros(3)), down).data)
        self.assertAlmostEqual(lhs, rhs, places=8)

    def test_rejects_other_kernels(self):
        spec = ConvSpec(1, 1, kernel=3, stride=2, transposed=True)
        with self.assertRaises(UnsupportedConfigError):
            conv2d_transposed(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones(spec.weight_shape)),
                              Tensor(np.zeros(1)), spec)


def test_max_pool_ties_route_to_first_position():
    x = Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64)
    tape = GradTape()
    pooled, argmax = max_pool2(x, tape)
    assert pooled.shape == (1, 1, 1, 1)
    assert argmax[0, 0, 0, 0] == 0
    target = f64(np.zeros((1, 1, 1, 1)))
    grads = backward(tape, mse_loss(pooled, target, tape))
    np.testing.assert_array_equal(grads[x.id].data[0, 0], [[2.0, 0.0], [0.0, 0.0]])


def test_max_pool_picks_window_maximum():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    pooled, _ = max_pool2(f64(x))
    np.testing.assert_array_equal(pooled.data[0, 0], [[5.0, 7.0], [13.0, 15.0]])


def test_max_pool_odd_size():
    with pytest.raises(ShapeError):
        max_pool2(Tensor(np.ones((1, 1, 3, 4))))


class TestBatchNorm(unittest.TestCase):

    def setUp(self):
        self.gamma = f64(np.ones(2))
        self.beta = f64(np.zeros(2))

    def fresh_state(self):
        return BatchNormState(np.zeros(2), np.ones(2))

    def test_train_output_is_standardised(self):
        x = np.random.default_rng(3).normal(4.0, 3.0, size=(4, 2, 6, 6))
        out = batch_norm(f64(x), self.gamma, self.beta, self.fresh_state(), TRAIN).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_constant_input_maps_to_beta(self):
        beta = f64(np.array([0.5, -0.25]))
        out = batch_norm(f64(np.full((2, 2, 3, 3), 7.0)), self.gamma, beta, self.fresh_state(), TRAIN).data
        np.testing.assert_allclose(out[:, 0], 0.5, atol=1e-3)
        np.testing.assert_allclose(out[:, 1], -0.25, atol=1e-3)

    def test_running_stats_update(self):
        state = self.fresh_state()
        x = np.zeros((2, 2, 2, 2))
        x[:, 0] = 10.0
        batch_norm(f64(x), self.gamma, self.beta, state, TRAIN)
        np.testing.assert_allclose(state.running_mean, [0.1, 0.0])
        np.testing.assert_allclose(state.running_var, [0.99, 0.99])
        self.assertTrue(state.ready)

    def test_eval_uses_running_stats(self):
        state = BatchNormState(np.array([1.0, -1.0]), np.array([4.0, 1.0]), ready=True)
        out = batch_norm(f64(np.ones((1, 2, 2, 2))), self.gamma, self.beta, state, EVAL).data
        np.testing.assert_allclose(out[0, 0], 0.0, atol=1e-6)
        np.testing.assert_allclose(out[0, 1], 2.0 / np.sqrt(1.0 + 1e-5), atol=1e-6)

    def test_eval_before_stats_exist(self):
        with self.assertRaises(BatchNormStateError):
            batch_norm(f64(np.ones((1, 2, 2, 2))), self.gamma, self.beta, self.fresh_state(), EVAL)

    def test_train_needs_two_values_per_channel(self):
        with self.assertRaises(ShapeError):
            batch_norm(f64(np.ones((1, 2, 1, 1))), self.gamma, self.beta, self.fresh_state(), TRAIN)


def test_prelu_scales_negative_side():
    x = f64(np.array([-2.0, -1.0, 0.5, 3.0]).reshape(1, 1, 2, 2))
    out = prelu(x, f64(np.array([0.25]))).data
    np.testing.assert_allclose(out.ravel(), [-0.5, -0.25, 0.5, 3.0])


def test_dropout_modes():
    x = Tensor(np.ones((4, 2, 16, 16)))
    assert dropout(x, 0.3, None, EVAL) is x
    assert dropout(x, 0.0, None, TRAIN) is x
    out = dropout(x, 0.5, np.random.default_rng(0), TRAIN).data
    assert set(np.unique(out)) <= {0.0, 2.0}


@pytest.mark.parametrize("rate", [0.3, 0.5])
def test_dropout_preserves_expectation(rate):
    x = Tensor(np.ones((1, 1, 1000, 1000), dtype=np.float32))
    out = dropout(x, rate, np.random.default_rng(11), TRAIN).data.astype(np.float64)
    assert abs(out.mean() - 1.0) < 0.01
    kept = out[out > 0.0]
    np.testing.assert_allclose(kept, 1.0 / (1.0 - rate), rtol=1e-6)
    assert abs(kept.size / out.size - (1.0 - rate)) < 0.01


def test_dropout_same_seed_same_mask():
    x = Tensor(np.ones((2, 2, 8, 8)))
    first = dropout(x, 0.3, np.random.default_rng(5), TRAIN).data
    second = dropout(x, 0.3, np.random.default_rng(5), TRAIN).data
    np.testing.assert_array_equal(first, second)


def test_sigmoid_stays_inside_open_interval():
    out = sigmoid(Tensor(np.array([-100.0, 0.0, 100.0]))).data
    assert np.all(out > 0.0) and np.all(out < 1.0)
    assert out[1] == pytest.approx(0.5)


def test_mse_loss_value():
    loss = mse_loss(f64(np.array([1.0, 2.0, 3.0])), f64(np.array([1.0, 0.0, 0.0])))
    assert loss.item() == pytest.approx(13.0 / 3.0)


def test_elementwise_shape_checks():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 3))))
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 2))))
    with pytest.raises(ShapeError):
        concat_channels([Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 4, 4)))])


class TestBackward(unittest.TestCase):

    def test_fan_out_gradients_are_summed(self):
        x = f64(np.array([1.0, 2.0]))
        tape = GradTape()
        doubled = add(x, x, tape)
        loss = mse_loss(doubled, f64(np.zeros(2)), tape)
        grads = backward(tape, loss)
        # d/dx mean((2x)^2) = 4x
        np.testing.assert_allclose(grads[x.id].data, [4.0, 8.0])

    def test_mse_gradient_without_numpy_warnings(self):
        pred = f64(np.array([[0.5, 1.0], [2.0, -1.0]]))
        target = f64(np.zeros((2, 2)))
        tape = GradTape()
        loss = mse_loss(pred, target, tape)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            grads = backward(tape, loss)
        np.testing.assert_allclose(grads[pred.id].data, 2.0 / 4.0 * pred.data)
        np.testing.assert_allclose(grads[target.id].data, -2.0 / 4.0 * pred.data)

    def test_unrelated_tensor_has_no_gradient(self):
        x = f64(np.ones(3))
        other = f64(np.ones(3))
        tape = GradTape()
        mul(other, other, tape)
        loss = mse_loss(x, f64(np.zeros(3)), tape)
        grads = backward(tape, loss)
        self.assertIn(x.id, grads)
        self.assertNotIn(other.id, grads)

    def test_concat_splits_gradient(self):
        a = f64(np.ones((1, 1, 2, 2)))
        b = f64(np.ones((1, 2, 2, 2)))
        tape = GradTape()
        loss = mse_loss(concat_channels([a, b], tape), f64(np.zeros((1, 3, 2, 2))), tape)
        grads = backward(tape, loss)
        self.assertEqual(grads[a.id].shape, (1, 1, 2, 2))
        self.assertEqual(grads[b.id].shape, (1, 2, 2, 2))

    def test_non_scalar_loss(self):
        tape = GradTape()
        out = add(f64(np.ones(2)), f64(np.ones(2)), tape)
        with self.assertRaises(TapeError):
            backward(tape, out)

    def test_loss_from_another_tape(self):
        loss = mse_loss(f64(np.ones(2)), f64(np.zeros(2)), GradTape())
        with self.assertRaises(TapeError):
            backward(GradTape(), loss)


if __name__ == '__main__':
    unittest.main()
