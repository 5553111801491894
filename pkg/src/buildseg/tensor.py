"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations build a DAG of nodes, each
carrying a closure that pushes adjoints to its parents; ``backward`` on a
scalar replays that record in reverse topological order. Gradients
accumulate additively across fan-out, so leaves must be reset with
``zero_grad`` between steps.

Precision is float32 by default. Setting the environment variable
``BUILDSEG_FP64=1`` (or using the ``precision`` context manager) switches
newly created tensors to float64, which is required for reliable
finite-difference gradient verification.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the bad axis."""


class ConfigError(ValueError):
    """A structural parameter (kernel size, group count, ...) is invalid."""


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


_DEFAULT_DTYPE = np.float64 if _env_flag("BUILDSEG_FP64") else np.float32

# When enabled, every op output is checked for NaN/Inf right after the
# forward computation. Costs one pass per op; meant for tests and debugging.
DEBUG_CHECKS = _env_flag("BUILDSEG_DEBUG")

_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default dtype (32 or 64 bits)."""
    if bits not in (32, 64):
        raise ConfigError("precision must be 32 or 64")
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; op outputs become plain leaves."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


class Tensor:
    """A dense n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op: str | None = None
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}{op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad leaf.

        Only scalar (single-element) roots are accepted, and a second call on
        the same root without a reset is rejected because gradients would
        silently double-accumulate.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a detached graph: nothing requires grad")
        if self._backward_done:
            raise RuntimeError("backward() called twice on the same node without reset")
        self._backward_done = True

        record = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(record):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                # intermediate adjoints are no longer needed once pushed
                if node is not self and not node._is_leaf():
                    node.grad = None

    def _is_leaf(self) -> bool:
        return self._backward_fn is None

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def _accumulate(self, grad: np.ndarray) -> None:
        # rebinding, never in-place: stored arrays may be shared between nodes
        self.grad = grad if self.grad is None else self.grad + grad

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes: Sequence[int]):
        return permute(self, axes)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / a.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(-g * data * data)

    return _make(data, (a,), backward, "reciprocal")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** exponent

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward, "log")


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.abs(a.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _make(data, (a,), backward, "abs")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            inside = (a.data > lo) & (a.data < hi)
            a._accumulate(g * inside.astype(g.dtype))

    return _make(data, (a,), backward, "clamp")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            x = a.data
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(g * s)

    return _make(data, (a,), backward, "softplus")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    from scipy.special import erf  # vectorized; numpy has no erf

    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a._accumulate(g * (cdf + x * pdf))

    return _make(data, (a,), backward, "gelu")


# -- reductions ------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward, "sum")


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)
    inv = 1.0 / a.data.size

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g * inv, a.shape).copy())

    return _make(data, (a,), backward, "mean")


def vmax(a: Tensor) -> Tensor:
    """Maximum over all elements; subgradient goes to the first argmax."""
    a = as_tensor(a)
    idx = int(np.argmax(a.data))
    data = np.asarray(a.data.reshape(-1)[idx], dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full.reshape(-1)[idx] = g
            a._accumulate(full)

    return _make(data, (a,), backward, "vmax")


def vmin(a: Tensor) -> Tensor:
    a = as_tensor(a)
    idx = int(np.argmin(a.data))
    data = np.asarray(a.data.reshape(-1)[idx], dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full.reshape(-1)[idx] = g
            a._accumulate(full)

    return _make(data, (a,), backward, "vmin")


# -- shape manipulation ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    data = a.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward, "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.transpose(g, inverse))

    return _make(data, (a,), backward, "permute")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """A contiguous slice along one axis, differentiable by zero-padding."""
    a = as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow out of range on axis {axis}: [{start}, {start + length}) vs extent {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index].copy()

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

    return _make(data, (a,), backward, "narrow")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for part, size in zip(parts, sizes):
            if part.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + size)
                part._accumulate(g[tuple(index)])
            offset += size

    return _make(data, tuple(parts), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked leading dimensions, numpy semantics."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape[-1]} (last axis of a) vs {b.shape[-2]} (second-to-last of b)")
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), backward, "matmul")


# -- parameter/constant constructors ------------------------------------------------


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    This is the independent oracle for the reverse-mode engine: it never
    touches the graph machinery, only repeated forward evaluations.
    """
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            hi = float(f(Tensor(base.copy())).data)
            flat[i] = saved - h
            lo = float(f(Tensor(base.copy())).data)
            flat[i] = saved
            out[i] = (hi - lo) / (2.0 * h)
    return grad
