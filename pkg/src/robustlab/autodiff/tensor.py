"""Dense tensors with a reverse-mode gradient tape.

A ``Tensor`` wraps a numpy array. Every operation on tensors that require
gradients records its parents and a backward closure; ``Tensor.backward``
walks that graph in reverse topological order and accumulates gradients into
the leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the scalar type used for new tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeError(RuntimeError):
    """Raised when backward is requested on something without a usable tape."""


def _consumed(_g):
    raise TapeError("tape already consumed by an earlier backward pass")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=dtype or _DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------ tape
    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Create the output of an operation and record it on the tape.

        ``backward`` maps the output gradient to a tuple with one entry per
        parent (``None`` for parents that need no gradient).
        """
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise TapeError("backward on a tensor that is not on a gradient tape")
        if grad is None:
            if self.data.ndim != 0:
                raise TapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = _consumed

    # ------------------------------------------------------------------ arithmetic
    def __add__(self, other) -> "Tensor":
        other = _wrap(other, self)
        a_shape, b_shape = self.shape, other.shape

        def back(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor.from_op(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _wrap(other, self)
        a_shape, b_shape = self.shape, other.shape

        def back(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor.from_op(self.data - other.data, (self, other), back)

    def __rsub__(self, other) -> "Tensor":
        return _wrap(other, self) - self

    def __mul__(self, other) -> "Tensor":
        other = _wrap(other, self)
        a, b = self, other

        def back(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor.from_op(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _wrap(other, self)
        a, b = self, other

        def back(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor.from_op(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other) -> "Tensor":
        return _wrap(other, self) / self

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self.data

        def back(g):
            return (g * exponent * x ** (exponent - 1),)

        return Tensor.from_op(x**exponent, (self,), back)

    def __matmul__(self, other) -> "Tensor":
        other = _wrap(other, self)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def back(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb

        return Tensor.from_op(a.data @ b.data, (a, b), back)

    # ------------------------------------------------------------------ reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int = -1) -> "Tensor":
        """Maximum along one axis; the gradient goes to the first maximiser."""
        x = self.data
        idx = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def back(g):
            grad = np.zeros_like(x)
            np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return (grad,)

        return Tensor.from_op(out, (self,), back)

    # ------------------------------------------------------------------ shape
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def flatten(self, start: int = 1) -> "Tensor":
        return self.reshape(self.shape[:start] + (-1,))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            index = index.data.astype(np.intp)
        x = self.data

        def back(g):
            grad = np.zeros_like(x)
            np.add.at(grad, index, g)
            return (grad,)

        return Tensor.from_op(np.array(x[index]), (self,), back)

    # ------------------------------------------------------------------ elementwise
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor.from_op(np.log(x), (self,), lambda g: (g / x,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor.from_op(self.data * mask, (self,), lambda g: (g * mask,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out * (1.0 - out),))

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor.from_op(np.abs(self.data), (self,), lambda g: (g * sign,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * 0.5 / out,))

    def clip(self, low=None, high=None) -> "Tensor":
        """Clamp values; gradient passes only where the input was inside the range."""
        x = self.data
        out = np.clip(x, low, high)
        mask = np.ones(x.shape, dtype=bool)
        if low is not None:
            mask &= x >= low
        if high is not None:
            mask &= x <= high
        return Tensor.from_op(out, (self,), lambda g: (g * mask,))

    def maximum(self, other) -> "Tensor":
        other = _wrap(other, self)
        a, b = self, other
        take_a = a.data >= b.data

        def back(g):
            ga = _unbroadcast(g * take_a, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * ~take_a, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor.from_op(np.maximum(a.data, b.data), (a, b), back)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)

    def back(g):
        ga = _unbroadcast(g * mask, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~mask, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(np.where(mask, a.data, b.data), (a, b), back)
