"""
Autodiff - Reverse-Mode Tensor Engine
=====================================

Double-precision n-dimensional arrays that record the operations
applied to them, so that:
- backward() accumulates exact gradients into leaf tensors
- grad(..., create_graph=True) records the backward pass itself,
  which makes the gradient differentiable again (double backprop,
  needed by the Wasserstein gradient penalty)

Every primitive's backward is written with primitives, never with raw
numpy, which is what makes the recorded backward pass differentiable.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from settings import DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence[float]]

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, 'enabled', True)


@contextmanager
def _grad_mode(enabled: bool):
    previous = is_grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = previous


def no_grad():
    """Context manager: operations inside are not recorded"""
    return _grad_mode(False)


class Tensor:
    """
    Array with an optional recorded history

    Attributes:
        data: float64 ndarray holding the values
        requires_grad: Whether gradients flow to / through this tensor
        grad: Accumulated gradient (ndarray, same shape) for leaf tensors
        name: Optional label (used by checkpoints and error messages)
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the values"""
        return self.data.ravel()

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, axes): return transpose(self, axes)


class Parameter(Tensor):
    """Trainable leaf tensor"""

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap an op result, attaching history only when someone needs it"""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _sum_to_array(a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = a.ndim - len(shape)
    if lead > 0:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a.reshape(shape)


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------

def sum_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum broadcast dimensions away until x has `shape` (adjoint of broadcast_to)"""
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def backward(g):
        return (broadcast_to(g, x.shape),)

    return _record(_sum_to_array(x.data, shape), (x,), backward)


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def backward(g):
        return (sum_to(g, x.shape),)

    return _record(np.broadcast_to(x.data, shape), (x,), backward)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)

    return _record(a.data + b.data, (a, b), backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (neg(g),))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return add(a, neg(b))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                sum_to(mul(g, a), b.shape) if b.requires_grad else None)

    return _record(a.data * b.data, (a, b), backward)


def reciprocal(a: ArrayLike, safe: bool = False) -> Tensor:
    """1/a; with safe=True entries where a == 0 map to 0 (and so does their derivative)"""
    a = as_tensor(a)
    if safe:
        nonzero = a.data != 0
        data = np.divide(1.0, a.data, out=np.zeros_like(a.data), where=nonzero)
    else:
        data = 1.0 / a.data

    def backward(g):
        return (neg(mul(g, mul(out, out))),)

    out = _record(data, (a,), backward)
    return out


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / np.asarray(b, dtype=np.float64))
    return mul(a, reciprocal(b))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    if exponent == 1.0:
        return a

    def backward(g):
        if exponent == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, exponent - 1.0), exponent)),)

    return _record(a.data ** exponent, (a,), backward)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (mul(g, out),)

    out = _record(np.exp(a.data), (a,), backward)
    return out


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (mul(g, reciprocal(a)),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _record(np.tanh(a.data), (a,), backward)
    return out


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _record(expit(a.data), (a,), backward)
    return out


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _record(a.data * mask, (a,), lambda g: (mul(g, mask),))


def leaky_relu(a: ArrayLike, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _record(a.data * factor, (a,), lambda g: (mul(g, factor),))


def sqrt(a: ArrayLike) -> Tensor:
    """Square root whose derivative at 0 is taken as 0 (subgradient)"""
    a = as_tensor(a)

    def backward(g):
        return (mul(g, mul(reciprocal(out, safe=True), 0.5)),)

    out = _record(np.sqrt(a.data), (a,), backward)
    return out


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = ((a.data >= low) & (a.data <= high)).astype(np.float64)
    return _record(np.clip(a.data, low, high), (a,), lambda g: (mul(g, inside),))


def absolute(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def transpose(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _record(a.data.reshape(tuple(shape)), (a,), lambda g: (reshape(g, original),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul operands do not align", a.shape, b.shape)

    def backward(g):
        return (sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None,
                sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None)

    return _record(np.matmul(a.data, b.data), (a, b), backward)


def _keepdims_shape(shape: Tuple[int, ...], axis) -> Tuple[int, ...]:
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    kept = _keepdims_shape(a.shape, axis)

    def backward(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = tsum(a, axis, keepdims)
    return mul(total, 1.0 / (a.size // total.size))


def slice_axis(a: ArrayLike, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    """a[..., start:stop:step, ...] along one axis (adjoint of embed)"""
    a = as_tensor(a)
    axis = axis % a.ndim
    length = a.shape[axis]
    start, stop, step = slice(start, stop, step).indices(length)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop, step)

    def backward(g):
        return (embed(g, axis, start, step, length),)

    return _record(a.data[tuple(index)], (a,), backward)


def embed(a: ArrayLike, axis: int, start: int, step: int, length: int) -> Tensor:
    """Place a into zeros of size `length` along axis at start, start+step, ... (adjoint of slice_axis)"""
    a = as_tensor(a)
    axis = axis % a.ndim
    count = a.shape[axis]
    last = start + step * (count - 1)
    if start < 0 or (count and last >= length):
        raise ShapeError(f"embed of {count} entries from {start} step {step} overruns length {length}",
                         a.shape)
    shape = list(a.shape)
    shape[axis] = length
    out = np.zeros(shape, dtype=np.float64)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, last + 1, step)
    out[tuple(index)] = a.data

    def backward(g):
        return (slice_axis(g, axis, start, last + 1, step),)

    return _record(out, (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        first = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != ndim or other != first:
            raise ShapeError("concat operands differ off the concatenation axis", tensors[0].shape, t.shape)
    total = sum(t.shape[axis] for t in tensors)
    out, offset = None, 0
    for t in tensors:
        placed = embed(t, axis, offset, 1, total)
        out = placed if out is None else add(out, placed)
        offset += t.shape[axis]
    return out


# ----------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from root through requires_grad links, parents first"""
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _propagate(root: Tensor, create_graph: bool) -> Tuple[List[Tensor], Dict[int, Tensor]]:
    if root.size != 1:
        raise DomainError(f"gradients need a scalar output, got shape {root.shape}")
    if not np.all(np.isfinite(root.data)):
        raise NumericError(f"non-finite output value {root.data.ravel()[0]}")

    order = _topological_order(root)
    grads: Dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}

    with _grad_mode(create_graph):
        for node in reversed(order):
            if node._backward is None or id(node) not in grads:
                continue
            parent_grads = node._backward(grads[id(node)])
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)
    return order, grads


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into every reachable leaf's .grad

    Repeated calls without zero_grad add up.

    Raises:
        DomainError: loss is not a scalar
        NumericError: loss is not finite
    """
    order, grads = _propagate(loss, create_graph=False)
    for node in order:
        if node.is_leaf and node.requires_grad and id(node) in grads:
            g = grads[id(node)].data
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> List[Tensor]:
    """
    Gradients of a scalar output with respect to `inputs`, leaving .grad untouched

    With create_graph=True the backward pass is recorded, so the returned
    tensors can themselves be differentiated (double backprop).
    """
    _, grads = _propagate(output, create_graph)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return result


class InputGradientNorm(NamedTuple):
    """Per-row input-gradient norms and the differentiable (‖∇ₓD‖₂ − 1)² batch mean"""
    norms: np.ndarray
    penalty: Tensor


def grad_of_input_norm(net_apply: Callable[[Tensor], Tensor], x: ArrayLike) -> InputGradientNorm:
    """
    Input-gradient norm of a network and its unit-norm penalty

    Computes ∇ₓD(x) with a recorded backward pass, forms the batch mean of
    (‖∇ₓD(x_i)‖₂ − 1)² and returns it as a tensor whose own backward reaches
    the network parameters. Rows are taken along axis 0; D must produce one
    scalar per row and treat rows independently.

    Args:
        net_apply: Maps a batch tensor to per-row scalars (shape (B,) or (B, 1))
        x: Points to evaluate at

    Returns:
        InputGradientNorm(norms, penalty)
    """
    x_in = Tensor(as_tensor(x).data, requires_grad=True)
    out = net_apply(x_in)
    if out.shape[0] != x_in.shape[0] or out.size != x_in.shape[0]:
        raise ShapeError("network must emit one scalar per batch row", x_in.shape, out.shape)

    (gx,) = grad(tsum(out), [x_in], create_graph=True)
    rows = reshape(gx, (x_in.shape[0], -1))
    norms = sqrt(tsum(mul(rows, rows), axis=1))
    if np.any(norms.data == 0):
        logger.warning(f"{int(np.sum(norms.data == 0))} row(s) with zero input gradient; using subgradient 0")
    penalty = mean(power(sub(norms, 1.0), 2.0))
    return InputGradientNorm(norms=norms.data.copy(), penalty=penalty)
