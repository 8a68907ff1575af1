"""
Tape mechanics and finite-difference checks for the differentiable ops.
"""

import numpy as np
import pytest

from equirobust import tensor as T
from equirobust.tensor import (BackwardError, ShapeError, Tensor, backward, input_gradient, input_jacobian,
                               no_grad, numerical_gradient)


def assert_grad_matches(fn, x, rtol=1e-5, atol=1e-8, h=1e-5):
    """Analytic gradient of the scalar fn(Tensor) vs central differences."""
    _, analytic = input_gradient(fn, x)
    numeric = numerical_gradient(lambda a: float(fn(Tensor(a)).item()), x, h)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def test_add_broadcast_gradient_sums_over_broadcast_axes():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((4,)), requires_grad=True)
    backward((a + b).sum())
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [5.0])


def test_elementwise_ops_match_finite_differences(rng):
    for _ in range(20):
        x = rng.uniform(0.5, 2.0, size=(3, 4))
        assert_grad_matches(lambda t: ((t * t).exp() / (t + 1.0)).log().sum(), x)
        assert_grad_matches(lambda t: (t ** 3 - t.sqrt()).sum(), x)


def test_relu_gradient_away_from_kink(rng):
    for _ in range(20):
        x = rng.normal(size=(5, 3))
        x[np.abs(x) < 1e-2] = 0.5
        assert_grad_matches(lambda t: (t.relu() * t).sum(), x)


def test_matmul_and_reductions(rng):
    w = rng.normal(size=(4, 3))
    for _ in range(20):
        x = rng.normal(size=(2, 4))
        assert_grad_matches(lambda t: (t @ Tensor(w)).max(axis=1).sum(), x)
        assert_grad_matches(lambda t: t.mean(axis=0).reshape(2, 2).transpose(1, 0)[0].sum(), x)


def test_conv2d_gradients_zero_and_reflect(rng):
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))
    for mode in ("zeros", "reflect"):
        for _ in range(20):
            x = rng.normal(size=(1, 3, 5, 5))
            assert_grad_matches(lambda t: (T.conv2d(t, w, padding=1, padding_mode=mode) ** 2).sum(), x)


def test_conv2d_weight_gradient(rng):
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    for _ in range(20):
        w = rng.normal(size=(3, 2, 3, 3))
        assert_grad_matches(lambda t: (T.conv2d(x, t, padding=1) ** 2).sum(), w)


def test_pooling_and_resize_gradients(rng):
    for _ in range(20):
        x = rng.normal(size=(1, 2, 6, 6))
        assert_grad_matches(lambda t: (T.max_pool2d(t, 2) ** 2).sum(), x)
        assert_grad_matches(lambda t: (T.avg_pool2d(t, 2) ** 2).sum(), x)
        assert_grad_matches(lambda t: (T.resize(t, (4, 5)) ** 2).sum(), x)
        assert_grad_matches(lambda t: (T.resize(t, (8, 8)) ** 2).sum(), x)


def test_rotation_roll_and_stack_gradients(rng):
    weights = Tensor(rng.normal(size=(2, 2, 3, 3)))
    for _ in range(20):
        x = rng.normal(size=(2, 3, 3))
        assert_grad_matches(lambda t: (T.stack([T.rot90(t, 1), T.roll(t, 1, axis=0)], axis=0) * weights).sum(), x)


def test_conv2d_of_ones_with_a_ones_filter():
    x = Tensor(np.ones((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    zeros = T.conv2d(x, w, padding=1).data[0, 0]
    np.testing.assert_allclose(zeros[1:-1, 1:-1], 9.0)
    assert zeros[0, 0] == pytest.approx(4.0)
    assert zeros[0, 2] == pytest.approx(6.0)
    np.testing.assert_allclose(T.conv2d(x, w, padding=1, padding_mode="reflect").data, 9.0)


def test_four_quarter_turns_are_the_identity(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    turned = x
    for _ in range(4):
        turned = T.rot90(turned, 1)
    np.testing.assert_array_equal(turned.data, x.data)
    np.testing.assert_array_equal(T.rot90(x, 4).data, x.data)
    assert not np.array_equal(T.rot90(x, 1).data, x.data)


def test_softmax_cross_entropy_gradient(rng):
    labels = np.array([0, 2, 1])
    for _ in range(20):
        logits = rng.normal(size=(3, 4))
        assert_grad_matches(lambda t: T.cross_entropy(t, labels), logits)
        assert_grad_matches(lambda t: (T.softmax(t, axis=1) ** 2).sum(), logits)


def test_cross_entropy_of_uniform_logits_is_log_k():
    loss = T.cross_entropy(Tensor(np.zeros((5, 10))), np.arange(5))
    assert abs(loss.item() - np.log(10.0)) < 1e-12


def test_resize_to_same_size_is_identity(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    np.testing.assert_array_equal(T.resize(Tensor(x), (5, 5)).data, x)


def test_interpolation_matrix_rows_sum_to_one():
    for n_in, n_out in [(8, 6), (8, 10), (3, 7)]:
        m = T.interpolation_matrix(n_in, n_out)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(BackwardError):
        backward(x * 2.0)


def test_tape_is_consumed_once():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(BackwardError):
        backward(loss)


def test_backward_on_a_leaf_output_is_repeatable():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward(x)
    backward(x)
    np.testing.assert_array_equal(x.grad, np.ones(1))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert y.is_leaf


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_input_jacobian_of_linear_map(rng):
    w = rng.normal(size=(6, 3))
    jac = input_jacobian(lambda t: t.reshape(t.shape[0], -1) @ Tensor(w), rng.normal(size=(6,)))
    np.testing.assert_allclose(jac, w.T)


def test_default_dtype_switch():
    with T.default_dtype(np.float32):
        assert T.as_tensor([1, 2]).dtype == np.float32
    assert T.as_tensor([1, 2]).dtype == np.float64
