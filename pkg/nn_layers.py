"""
NN Layers - Differentiable Building Blocks
==========================================

Functional ops and small Module classes on top of autodiff:
- dense, conv1d, conv1d_transpose, batchnorm1d, dropout
- mse and bce losses
- Module bookkeeping (parameters, buffers, train/eval, state dicts)
- .npz parameter checkpoints
"""

import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Parameter, Tensor
from settings import DomainError, ShapeError

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv_transpose_output_length(length: int, kernel: int, stride: int = 1,
                                 padding: int = 0, output_padding: int = 0) -> int:
    return (length - 1) * stride - 2 * padding + kernel + output_padding


# ----------------------------------------------------------------------
# functional
# ----------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (B, in) @ weight (in, out) + bias (out)"""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("dense input does not match weight", x.shape, weight.shape)
    out = ad.matmul(x, weight)
    return out + bias if bias is not None else out


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    1-D cross-correlation

    Args:
        x: (B, C_in, L)
        weight: (C_out, C_in, K)
        bias: (C_out,) or None
        stride: Step between output positions
        padding: Zeros added on both ends

    Returns:
        (B, C_out, floor((L + 2*padding - K)/stride) + 1)
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv1d input channels do not match weight", x.shape, weight.shape)
    c_out, c_in, kernel = weight.shape
    length = x.shape[2]
    l_out = conv_output_length(length, kernel, stride, padding)
    if l_out < 1:
        raise ShapeError(f"conv1d kernel {kernel} longer than padded input", x.shape, weight.shape)

    padded = ad.embed(x, 2, padding, 1, length + 2 * padding) if padding else x
    out = None
    for k in range(kernel):
        taps = ad.slice_axis(padded, 2, k, k + stride * (l_out - 1) + 1, stride)
        w_k = ad.reshape(ad.slice_axis(weight, 2, k, k + 1), (c_out, c_in))
        term = ad.matmul(w_k, taps)
        out = term if out is None else out + term
    if bias is not None:
        out = out + ad.reshape(bias, (1, c_out, 1))
    return out


def conv1d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """
    Transposed 1-D convolution (adjoint of conv1d in its input)

    Args:
        x: (B, C_in, L)
        weight: (C_in, C_out, K)

    Returns:
        (B, C_out, (L-1)*stride - 2*padding + K + output_padding)
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv1d_transpose input channels do not match weight", x.shape, weight.shape)
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise DomainError(f"output_padding {output_padding} must be smaller than stride {stride}")
    c_in, c_out, kernel = weight.shape
    length = x.shape[2]
    full = (length - 1) * stride + kernel + output_padding
    l_out = full - 2 * padding
    if l_out < 1:
        raise ShapeError("conv1d_transpose padding removes the whole output", x.shape, weight.shape)

    acc = None
    for k in range(kernel):
        w_k = ad.reshape(ad.slice_axis(weight, 2, k, k + 1), (c_in, c_out))
        term = ad.matmul(ad.transpose(w_k, (1, 0)), x)
        placed = ad.embed(term, 2, k, stride, full)
        acc = placed if acc is None else acc + placed
    out = ad.slice_axis(acc, 2, padding, padding + l_out) if (padding or l_out != full) else acc
    if bias is not None:
        out = out + ad.reshape(bias, (1, c_out, 1))
    return out


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.9,
                eps: float = 1e-5) -> Tensor:
    """
    Batch normalization over (B, C) or (B, C, L) inputs, per channel

    In training the batch statistics are used and the running buffers are
    updated in place as running = momentum*running + (1-momentum)*batch.
    In eval the frozen running statistics make this a fixed affine map.
    """
    if x.ndim not in (2, 3) or x.shape[1] != gamma.shape[0]:
        raise ShapeError("batchnorm channels do not match", x.shape, gamma.shape)
    axes = (0,) if x.ndim == 2 else (0, 2)
    view = (1, -1) if x.ndim == 2 else (1, -1, 1)

    if training:
        mu = ad.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(-1)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(-1)
        normed = centered * ad.power(var + eps, -0.5)
    else:
        normed = (x - running_mean.reshape(view)) * (1.0 / np.sqrt(running_var.reshape(view) + eps))
    return normed * ad.reshape(gamma, view) + ad.reshape(beta, view)


def _check_drop_probability(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability {p} outside [0, 1)")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; exact identity when not training or p == 0"""
    _check_drop_probability(p)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * keep


def mse(x: Tensor, y: Union[Tensor, np.ndarray]) -> Tensor:
    y = ad.as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError("mse operands differ", x.shape, y.shape)
    diff = x - y
    return ad.mean(diff * diff)


def bce(p: Tensor, t: Union[Tensor, np.ndarray]) -> Tensor:
    """Binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]"""
    t = ad.as_tensor(t)
    if p.shape != t.shape:
        raise ShapeError("bce operands differ", p.shape, t.shape)
    q = ad.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -ad.mean(t * ad.log(q) + (1.0 - t) * ad.log(1.0 - q))


# ----------------------------------------------------------------------
# modules
# ----------------------------------------------------------------------

class Module:
    """Parameter container with train/eval mode"""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        named = []
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                named.append((full, child))
            else:
                named.extend(child.named_parameters(full + "."))
        return named

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        named = [(f"{prefix}{n}", b) for n, b in getattr(self, '_buffers', {}).items()]
        for name, child in self._children():
            if isinstance(child, Module):
                named.extend(child.named_buffers(f"{prefix}{name}."))
        return named

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"buffer:{n}" for n in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DomainError(f"checkpoint does not match model (missing {missing}, unexpected {extra})")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"checkpoint entry {name}", state[name].shape, p.shape)
            p.data = np.array(state[name], dtype=np.float64)
        for name, b in buffers.items():
            b[...] = state[f"buffer:{name}"]


def _uniform(rng: np.random.Generator, bound: float, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, bound, (in_features, out_features)))
        self.bias = Parameter(_uniform(rng, bound, (out_features,)))

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        self.weight = Parameter(_uniform(rng, bound, (out_channels, in_channels, kernel_size)))
        self.bias = Parameter(_uniform(rng, bound, (out_channels,)))
        self.stride = stride
        self.padding = padding

    def output_length(self, length: int) -> int:
        return conv_output_length(length, self.weight.shape[2], self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 output_padding: int = 0):
        super().__init__()
        bound = 1.0 / np.sqrt(out_channels * kernel_size)
        self.weight = Parameter(_uniform(rng, bound, (in_channels, out_channels, kernel_size)))
        self.bias = Parameter(_uniform(rng, bound, (out_channels,)))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x: Tensor) -> Tensor:
        return conv1d_transpose(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self._buffers = {
            'running_mean': np.zeros(channels),
            'running_var': np.ones(channels),
        }
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm1d(x, self.gamma, self.beta, self._buffers['running_mean'],
                           self._buffers['running_var'], self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        _check_drop_probability(p)
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.rng, self.training)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def save_parameters(path: Union[str, Path], named: Dict[str, np.ndarray]) -> Path:
    """Write (name, shape, values) records as an .npz archive"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        np.savez(f, **{name: np.asarray(values, dtype=np.float64) for name, values in named.items()})
    logger.info(f"Saved {len(named)} arrays to {path}")
    return path


def load_parameters(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            return {name: archive[name] for name in archive.files}
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as e:
        raise DomainError(f"cannot read checkpoint {path}: {e}") from e
