"""
Optimizers - Adam, Adagrad, SGD
===============================

First-order optimizers over autodiff Parameters:
- Adam with bias correction
- Adagrad with accumulated squared gradients
- Plain SGD
- NaN/inf gradients abort the whole step before any parameter changes
"""

import logging
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np

from autodiff import Parameter
from settings import DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)

OptimizerKind = Literal['adam', 'adagrad', 'sgd']


class Optimizer:
    """Base class: owns the parameter list, the step counter t and moment buffers"""

    kind: str = "base"

    def __init__(self, params: Sequence[Parameter], lr: float):
        if lr <= 0:
            raise DomainError(f"learning rate must be positive, got {lr}")
        self.params: List[Parameter] = list(params)
        self.lr = float(lr)
        self.t = 0
        self.buffers: Dict[str, List[np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _collect(self, grads: Optional[Sequence[np.ndarray]]) -> List[Optional[np.ndarray]]:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise DomainError(f"{len(grads)} gradients for {len(self.params)} parameters")
        collected = []
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                collected.append(None)
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"gradient {i} does not match its parameter", g.shape, p.shape)
            if not np.all(np.isfinite(g)):
                logger.warning(f"{self.kind}: non-finite gradient at step {self.t + 1}, nothing updated")
                raise NumericError(f"non-finite gradient for parameter {i} "
                                   f"({p.name or tuple(p.shape)}); step {self.t + 1} aborted")
            collected.append(g)
        return collected

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        """
        Apply one update

        Args:
            grads: Gradients aligned with the parameters (default: each p.grad).
                Parameters whose gradient is None are left untouched.
        """
        collected = self._collect(grads)
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, collected)):
            if g is not None:
                p.data = p.data - self._update(i, g)

    def _update(self, index: int, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {'t': np.array(self.t)}
        for name, arrays in self.buffers.items():
            for i, arr in enumerate(arrays):
                state[f"{name}.{i}"] = arr.copy()
        return state


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, index: int, g: np.ndarray) -> np.ndarray:
        return self.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.9, eps: float = 1e-8):
        super().__init__(params, lr)
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise DomainError(f"Adam betas must lie in [0, 1), got ({beta1}, {beta2})")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.buffers = {
            'm': [np.zeros(p.shape) for p in self.params],
            'v': [np.zeros(p.shape) for p in self.params],
        }

    def _update(self, index: int, g: np.ndarray) -> np.ndarray:
        m = self.buffers['m'][index]
        v = self.buffers['v'][index]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Adagrad(Optimizer):
    kind = "adagrad"

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-2, eps: float = 1e-8):
        super().__init__(params, lr)
        self.eps = eps
        self.buffers = {'sum_sq': [np.zeros(p.shape) for p in self.params]}

    def _update(self, index: int, g: np.ndarray) -> np.ndarray:
        acc = self.buffers['sum_sq'][index]
        acc += g * g
        return self.lr * g / (np.sqrt(acc) + self.eps)


def make_optimizer(kind: str, params: Sequence[Parameter], lr: float,
                   betas: Sequence[float] = (0.5, 0.9)) -> Optimizer:
    """Build an optimizer by name ('adam', 'adagrad' or 'sgd')"""
    kind = kind.lower()
    if kind == 'adam':
        return Adam(params, lr=lr, beta1=betas[0], beta2=betas[1])
    if kind == 'adagrad':
        return Adagrad(params, lr=lr)
    if kind == 'sgd':
        return SGD(params, lr=lr)
    raise DomainError(f"Unknown optimizer '{kind}' (known: adam, adagrad, sgd)")
