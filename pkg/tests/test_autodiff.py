"""Tests for the reverse-mode engine: exact gradients, double backprop, error cases"""

import numpy as np
import pytest

import autodiff as ad
from autodiff import Parameter, Tensor
from conftest import numeric_gradient, relative_error
from settings import DomainError, NumericError, ShapeError

SEEDS = range(10)
FIRST_ORDER_TOL = 1e-5
SECOND_ORDER_TOL = 1e-4


def test_relu_forward():
    out = ad.relu(Tensor([-1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_square_gradient_at_three():
    x = Parameter([3.0])
    ad.backward(ad.tsum(x * x))
    np.testing.assert_allclose(x.grad, [6.0])


def test_fan_out_accumulates():
    x = Parameter(np.array([1.5, -2.0]))
    ad.backward(ad.tsum(x + x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_repeated_backward_adds_up():
    x = Parameter([2.0])
    loss = ad.tsum(x * 3.0)
    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])
    x.zero_grad()
    assert x.grad is None


def test_non_scalar_loss_rejected():
    x = Parameter(np.ones(3))
    with pytest.raises(DomainError):
        ad.backward(x * 2.0)


def test_non_finite_loss_rejected():
    x = Parameter([-1.0])
    with pytest.raises(NumericError):
        ad.backward(ad.tsum(ad.log(x)))


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError) as info:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))
    assert "(2, 3)" in str(info.value) and "(4, 1)" in str(info.value)


def test_no_grad_records_nothing():
    x = Parameter(np.ones(2))
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_grad_leaves_dot_grad_untouched():
    x = Parameter(np.array([1.0, 2.0]))
    (gx,) = ad.grad(ad.tsum(x * x), [x])
    np.testing.assert_allclose(gx.data, [2.0, 4.0])
    assert x.grad is None


def test_grad_of_unreached_input_is_zero():
    x = Parameter(np.ones(3))
    y = Parameter(np.ones(2))
    (gy,) = ad.grad(ad.tsum(x * 2.0), [y])
    np.testing.assert_array_equal(gy.data, np.zeros(2))


def test_sqrt_at_zero_uses_zero_subgradient():
    x = Parameter(np.array([0.0, 4.0]))
    ad.backward(ad.tsum(ad.sqrt(x)))
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_broadcast_gradient_sums_back():
    b = Parameter(np.array([1.0, 2.0, 3.0]))
    x = Tensor(np.ones((4, 3)))
    ad.backward(ad.tsum(x * b))
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


# ============================================================================
# FINITE-DIFFERENCE CHECKS
# ============================================================================

def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 1.5, size=shape)


UNARY_OPS = {
    'exp': (ad.exp, _away_from_zero),
    'log': (ad.log, _positive),
    'tanh': (ad.tanh, _away_from_zero),
    'sigmoid': (ad.sigmoid, _away_from_zero),
    'relu': (ad.relu, _away_from_zero),
    'leaky_relu': (lambda t: ad.leaky_relu(t, 0.2), _away_from_zero),
    'sqrt': (ad.sqrt, _positive),
    'power': (lambda t: ad.power(t, 3.0), _away_from_zero),
    'reciprocal': (ad.reciprocal, _positive),
    'absolute': (ad.absolute, _away_from_zero),
    'mean_axis': (lambda t: ad.mean(t, axis=1, keepdims=True), _away_from_zero),
    'sum_axes': (lambda t: ad.tsum(t, axis=(0, 1)), _away_from_zero),
    'transpose': (lambda t: ad.transpose(t, (1, 0, 2)), _away_from_zero),
    'reshape': (lambda t: ad.reshape(t, (-1, 4)), _away_from_zero),
    'slice': (lambda t: ad.slice_axis(t, 2, 1, 4, 2), _away_from_zero),
    'embed': (lambda t: ad.embed(t, 2, 1, 2, 9), _away_from_zero),
    'concat': (lambda t: ad.concat([t, t * 2.0], axis=1), _away_from_zero),
}


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.tsum(out * weights)


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_gradients_match_finite_differences(name, seed):
    op, sampler = UNARY_OPS[name]
    rng = np.random.default_rng(seed)
    values = sampler(rng, (2, 3, 4))
    weights = rng.normal(size=op(Tensor(values)).shape)

    x = Parameter(values.copy())
    ad.backward(_weighted_sum(op(x), weights))

    point = values.copy()
    numeric = numeric_gradient(lambda: float(_weighted_sum(op(Tensor(point)), weights).data), point)
    assert relative_error(x.grad, numeric) <= FIRST_ORDER_TOL


BINARY_OPS = {
    'add': lambda a, b: a + b,
    'sub': lambda a, b: a - b,
    'mul': lambda a, b: a * b,
    'div': lambda a, b: a / b,
    'matmul': lambda a, b: ad.matmul(a, ad.transpose(b, (0, 2, 1))),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_gradients_match_finite_differences(name, seed):
    op = BINARY_OPS[name]
    rng = np.random.default_rng(100 + seed)
    a_val = _away_from_zero(rng, (2, 3, 4))
    b_val = _positive(rng, (2, 3, 4))
    weights = rng.normal(size=op(Tensor(a_val), Tensor(b_val)).shape)

    a, b = Parameter(a_val.copy()), Parameter(b_val.copy())
    ad.backward(_weighted_sum(op(a, b), weights))

    pa, pb = a_val.copy(), b_val.copy()
    f = lambda: float(_weighted_sum(op(Tensor(pa), Tensor(pb)), weights).data)  # noqa: E731
    assert relative_error(a.grad, numeric_gradient(f, pa)) <= FIRST_ORDER_TOL
    assert relative_error(b.grad, numeric_gradient(f, pb)) <= FIRST_ORDER_TOL


def test_broadcast_matmul_gradient():
    rng = np.random.default_rng(7)
    x_val = rng.normal(size=(5, 3))
    w_val = rng.normal(size=(3, 2))
    x, w = Parameter(x_val.copy()), Parameter(w_val.copy())
    ad.backward(ad.tsum(ad.tanh(ad.matmul(x, w))))

    pw = w_val.copy()
    numeric = numeric_gradient(lambda: float(np.sum(np.tanh(x_val @ pw))), pw)
    assert relative_error(w.grad, numeric) <= FIRST_ORDER_TOL


# ============================================================================
# DOUBLE BACKPROP
# ============================================================================

def test_second_derivative_of_cube():
    x = Parameter(np.array([2.0]))
    (gx,) = ad.grad(ad.tsum(ad.power(x, 3.0)), [x], create_graph=True)
    ad.backward(ad.tsum(gx))
    np.testing.assert_allclose(x.grad, [12.0])


def test_input_norm_of_unit_linear_critic_is_zero():
    w = Parameter(np.array([[0.6], [0.8]]))
    x = np.random.default_rng(0).normal(size=(8, 2))
    result = ad.grad_of_input_norm(lambda t: ad.matmul(t, w), x)
    np.testing.assert_allclose(result.norms, np.ones(8))
    assert abs(float(result.penalty.data)) < 1e-9
    ad.backward(result.penalty)
    np.testing.assert_allclose(w.grad, np.zeros((2, 1)), atol=1e-9)


def test_input_norm_of_scaled_linear_critic():
    w = Parameter(np.array([[2.0], [2.0], [1.0]]))
    x = np.random.default_rng(1).normal(size=(4, 3))
    result = ad.grad_of_input_norm(lambda t: ad.matmul(t, w), x)
    np.testing.assert_allclose(result.norms, np.full(4, 3.0))
    assert abs(20.0 * float(result.penalty.data) - 80.0) < 1e-9


def test_input_norm_rejects_non_scalar_rows():
    w = Parameter(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        ad.grad_of_input_norm(lambda t: ad.matmul(t, w), np.ones((4, 3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_penalty_parameter_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.normal(size=(6, 4))
    w1 = Parameter(rng.normal(size=(4, 5)))
    w2 = Parameter(rng.normal(size=(5, 1)))

    def critic(t):
        return ad.matmul(ad.tanh(ad.matmul(t, w1)), w2)

    ad.backward(ad.grad_of_input_norm(critic, x).penalty)

    def penalty_value():
        return float(ad.grad_of_input_norm(critic, x).penalty.data)

    for param in (w1, w2):
        analytic = param.grad.copy()
        numeric = numeric_gradient(penalty_value, param.data)
        assert relative_error(analytic, numeric) <= SECOND_ORDER_TOL
