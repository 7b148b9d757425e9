"""Adam with bias correction, L2 weight decay and per-epoch learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    learning_rate: float
    decay_per_epoch: float = 1.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")

    def end_epoch(self) -> None:
        self.learning_rate *= self.decay_per_epoch


def adam_step(state: AdamState, params: dict, grads: dict | None = None) -> None:
    """Apply one Adam update in place to ``params`` (name -> Tensor).

    ``grads`` defaults to each parameter's ``.grad``; missing gradients count
    as zero. Raises ``NonFiniteGradient`` before touching any state if a
    gradient is NaN or infinite.
    """
    resolved = {}
    for name, p in params.items():
        g = grads[name] if grads is not None and name in grads else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        resolved[name] = g

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, p in params.items():
        g = resolved[name]
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon_hat)


class ArrayAdam:
    """Adam ascent/descent on a plain array (attack and projection inner loops).

    ``sign=+1`` ascends, ``sign=-1`` descends. Moments are per element, so
    rows of a batch evolve independently.
    """

    def __init__(self, shape, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float64):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = np.zeros(shape[0], dtype=np.int64)

    def step(self, grad: np.ndarray, rows=None, sign: float = 1.0) -> np.ndarray:
        """Return the update for the selected rows and advance their moments."""
        if rows is None:
            rows = np.arange(self.m.shape[0])
        self.t[rows] += 1
        t = self.t[rows].reshape((-1,) + (1,) * (grad.ndim - 1))
        m = self.beta1 * self.m[rows] + (1.0 - self.beta1) * grad
        v = self.beta2 * self.v[rows] + (1.0 - self.beta2) * grad * grad
        self.m[rows] = m
        self.v[rows] = v
        mhat = m / (1.0 - self.beta1**t)
        vhat = v / (1.0 - self.beta2**t)
        lr = self.lr if np.isscalar(self.lr) else np.asarray(self.lr)
        return sign * lr * mhat / (np.sqrt(vhat) + self.eps)


def parameters_of(obj) -> dict:
    if isinstance(obj, dict):
        return obj
    return obj.named_parameters()


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def all_finite(tensors) -> bool:
    return all(np.all(np.isfinite(t.data if isinstance(t, Tensor) else t)) for t in tensors)
