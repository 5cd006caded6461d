"""Tests for layers: shapes, exact gradients, train/eval behavior, checkpoints"""

import numpy as np
import pytest

import autodiff as ad
import nn_layers as nn
from autodiff import Parameter, Tensor
from conftest import numeric_gradient, relative_error
from settings import DomainError, ShapeError

TOL = 1e-5


def _direct_conv1d(x, w, b, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    c_out, _, k = w.shape
    l_out = (xp.shape[2] - k) // stride + 1
    out = np.zeros((x.shape[0], c_out, l_out))
    for i in range(l_out):
        window = xp[:, :, i * stride:i * stride + k]
        out[:, :, i] = np.einsum('bck,ock->bo', window, w)
    return out + b.reshape(1, -1, 1)


def test_conv1d_output_length():
    x = Tensor(np.ones((1, 1, 8)))
    w = Tensor(np.ones((2, 1, 3)))
    assert nn.conv1d(x, w).shape == (1, 2, 6)
    assert nn.conv_output_length(16, 3, 2, 1) == 8


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
def test_conv1d_matches_direct_correlation(stride, padding):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(2, 3, 11))
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    out = nn.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, _direct_conv1d(x, w, b, stride, padding), atol=1e-12)


def test_conv1d_transpose_is_adjoint_of_conv1d():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 9))
    w = rng.normal(size=(5, 3, 3))
    y = rng.normal(size=(2, 5, 5))
    forward = nn.conv1d(Tensor(x), Tensor(w), stride=2, padding=1).data
    back = nn.conv1d_transpose(Tensor(y), Tensor(w), stride=2, padding=1).data
    assert back.shape == x.shape
    assert np.isclose(np.sum(forward * y), np.sum(x * back))


def test_conv1d_transpose_output_padding():
    out = nn.conv1d_transpose(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((2, 1, 3))),
                              stride=2, padding=1, output_padding=1)
    assert out.shape == (1, 1, 8)
    with pytest.raises(DomainError):
        nn.conv1d_transpose(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((2, 1, 3))),
                            stride=2, output_padding=2)


def test_dense_shape_error_names_shapes():
    with pytest.raises(ShapeError) as info:
        nn.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(info.value)


@pytest.mark.parametrize("seed", range(10))
def test_conv_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x_val = rng.normal(size=(2, 2, 9))
    w_val = rng.normal(size=(3, 2, 3))
    wt_val = rng.normal(size=(3, 2, 3))
    out_w = rng.normal(size=(2, 2, 9))

    def loss(x, w, wt):
        h = ad.tanh(nn.conv1d(x, w, stride=2, padding=1))
        return ad.tsum(nn.conv1d_transpose(h, wt, stride=2, padding=1) * out_w)

    x, w, wt = Parameter(x_val.copy()), Parameter(w_val.copy()), Parameter(wt_val.copy())
    ad.backward(loss(x, w, wt))

    px, pw, pwt = x_val.copy(), w_val.copy(), wt_val.copy()
    f = lambda: float(loss(Tensor(px), Tensor(pw), Tensor(pwt)).data)  # noqa: E731
    assert relative_error(x.grad, numeric_gradient(f, px)) <= TOL
    assert relative_error(w.grad, numeric_gradient(f, pw)) <= TOL
    assert relative_error(wt.grad, numeric_gradient(f, pwt)) <= TOL


@pytest.mark.parametrize("seed", range(10))
def test_batchnorm_training_gradient(seed):
    rng = np.random.default_rng(50 + seed)
    x_val = rng.normal(size=(6, 3, 4))
    gamma_val = rng.uniform(0.5, 1.5, size=3)
    out_w = rng.normal(size=(6, 3, 4))

    def loss(x, gamma):
        rm, rv = np.zeros(3), np.ones(3)
        return ad.tsum(nn.batchnorm1d(x, gamma, Tensor(np.zeros(3)), rm, rv, training=True) * out_w)

    x, gamma = Parameter(x_val.copy()), Parameter(gamma_val.copy())
    ad.backward(loss(x, gamma))

    px, pg = x_val.copy(), gamma_val.copy()
    f = lambda: float(loss(Tensor(px), Tensor(pg)).data)  # noqa: E731
    assert relative_error(x.grad, numeric_gradient(f, px)) <= TOL
    assert relative_error(gamma.grad, numeric_gradient(f, pg)) <= TOL


def test_batchnorm_updates_running_stats_in_training_only():
    bn = nn.BatchNorm1d(2)
    x = np.array([[1.0, 10.0], [3.0, 20.0]])
    bn(Tensor(x))
    np.testing.assert_allclose(bn._buffers['running_mean'], [0.2, 1.5])
    np.testing.assert_allclose(bn._buffers['running_var'], [0.9 + 0.1 * 1.0, 0.9 + 0.1 * 25.0])

    bn.eval()
    before = bn.state_dict()
    out = bn(Tensor(x))
    after = bn.state_dict()
    for key in before:
        np.testing.assert_array_equal(before[key], after[key])
    rm, rv = before['buffer:running_mean'], before['buffer:running_var']
    np.testing.assert_allclose(out.data, (x - rm) / np.sqrt(rv + bn.eps))


def test_dropout_identity_in_eval_and_scaled_in_training():
    x = Tensor(np.ones((100, 50)))
    layer = nn.Dropout(0.2, np.random.default_rng(0))
    trained = layer(x).data
    np.testing.assert_allclose(trained[trained != 0.0], 1.25)
    assert 0.15 < np.mean(trained == 0.0) < 0.25
    layer.eval()
    assert layer(x) is x


def test_dropout_rejects_bad_probability():
    with pytest.raises(DomainError):
        nn.dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0), training=True)
    with pytest.raises(DomainError):
        nn.dropout(Tensor(np.ones(3)), -0.1, np.random.default_rng(0), training=False)
    with pytest.raises(DomainError):
        nn.Dropout(1.5, np.random.default_rng(0))


def test_mse_and_bce_values():
    x = Tensor(np.array([0.2, 0.4]))
    assert nn.mse(x, x.data).item() == 0.0
    bce = nn.bce(Tensor(np.array([0.0])), np.array([1.0]))
    assert np.isclose(bce.item(), -np.log(nn.BCE_EPS))
    half = nn.bce(Tensor(np.array([0.5, 0.5])), np.array([0.0, 1.0]))
    assert np.isclose(half.item(), np.log(2.0))


class _TwoLayer(nn.Module):
    def __init__(self, rng):
        super().__init__()
        self.conv = nn.Conv1d(1, 2, 3, rng, stride=2, padding=1)
        self.norm = nn.BatchNorm1d(2)
        self.heads = [nn.Dense(16, 1, rng)]

    def forward(self, x):
        h = self.norm(self.conv(x))
        return self.heads[0](ad.reshape(h, (x.shape[0], -1)))


def test_module_walks_nested_parameters_and_buffers():
    model = _TwoLayer(np.random.default_rng(0))
    names = [n for n, _ in model.named_parameters()]
    assert names == ['conv.weight', 'conv.bias', 'norm.gamma', 'norm.beta',
                     'heads.0.weight', 'heads.0.bias']
    assert [n for n, _ in model.named_buffers()] == ['norm.running_mean', 'norm.running_var']
    model.eval()
    assert not model.norm.training and not model.heads[0].training


def test_state_dict_round_trip_through_npz(tmp_path):
    model = _TwoLayer(np.random.default_rng(0))
    model(Tensor(np.random.default_rng(1).normal(size=(4, 1, 16))))
    path = nn.save_parameters(tmp_path / "model.npz", model.state_dict())

    other = _TwoLayer(np.random.default_rng(99))
    other.load_state_dict(nn.load_parameters(path))
    for (name, a), (_, b) in zip(model.state_dict().items(), other.state_dict().items()):
        np.testing.assert_array_equal(a, b, err_msg=name)


def test_load_state_dict_is_strict():
    model = _TwoLayer(np.random.default_rng(0))
    state = model.state_dict()
    del state['conv.bias']
    with pytest.raises(DomainError):
        model.load_state_dict(state)

    state = model.state_dict()
    state['conv.weight'] = np.zeros((3, 1, 3))
    with pytest.raises(ShapeError):
        model.load_state_dict(state)


def test_load_parameters_rejects_garbage(tmp_path):
    path = tmp_path / "broken.npz"
    path.write_bytes(b"not an archive")
    with pytest.raises(DomainError):
        nn.load_parameters(path)
