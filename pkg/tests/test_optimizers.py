"""Tests for optimizer update rules and the non-finite gradient guard"""

import numpy as np
import pytest

from autodiff import Parameter
from optimizers import SGD, Adagrad, Adam, make_optimizer
from settings import DomainError, NumericError, ShapeError


def test_sgd_step():
    p = Parameter(np.array([1.0]))
    opt = SGD([p], lr=0.1)
    p.grad = p.data.copy()
    opt.step()
    np.testing.assert_allclose(p.data, [0.9])


def test_adam_first_step_is_learning_rate():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=1e-3)
    opt.step([np.array([1.0, -5.0])])
    np.testing.assert_allclose(p.data, [1.0 - 1e-3, -2.0 + 1e-3], rtol=1e-9)
    assert opt.t == 1


def test_adagrad_second_step():
    p = Parameter(np.array([0.0]))
    opt = Adagrad([p], lr=0.1)
    opt.step([np.array([1.0])])
    before = p.data.copy()
    opt.step([np.array([1.0])])
    assert abs((before - p.data)[0] - 0.1 / np.sqrt(2.0)) < 1e-9


def test_nan_gradient_aborts_whole_step():
    a, b = Parameter(np.array([1.0])), Parameter(np.array([2.0]))
    opt = Adam([a, b], lr=0.1)
    with pytest.raises(NumericError):
        opt.step([np.array([0.5]), np.array([np.nan])])
    np.testing.assert_array_equal(a.data, [1.0])
    np.testing.assert_array_equal(b.data, [2.0])
    assert opt.t == 0
    np.testing.assert_array_equal(opt.buffers['m'][0], [0.0])


def test_missing_gradient_leaves_parameter_alone():
    a, b = Parameter(np.array([1.0])), Parameter(np.array([2.0]))
    opt = SGD([a, b], lr=1.0)
    a.grad = np.array([0.5])
    opt.step()
    np.testing.assert_array_equal(a.data, [0.5])
    np.testing.assert_array_equal(b.data, [2.0])


def test_gradient_shape_checked():
    p = Parameter(np.zeros(3))
    with pytest.raises(ShapeError):
        SGD([p], lr=0.1).step([np.zeros(2)])


def test_zero_grad_clears():
    p = Parameter(np.zeros(2))
    p.grad = np.ones(2)
    opt = SGD([p], lr=0.1)
    opt.zero_grad()
    assert p.grad is None


def test_make_optimizer():
    p = Parameter(np.zeros(1))
    adam = make_optimizer('Adam', [p], lr=1e-4, betas=(0.5, 0.9))
    assert isinstance(adam, Adam) and adam.beta1 == 0.5 and adam.beta2 == 0.9
    assert isinstance(make_optimizer('adagrad', [p], lr=1e-2), Adagrad)
    with pytest.raises(DomainError):
        make_optimizer('rmsprop', [p], lr=1e-3)
    with pytest.raises(DomainError):
        make_optimizer('sgd', [p], lr=0.0)
