"""
Dense tensors with reverse-mode automatic differentiation.

Provides:
- Tensor: float64 array with optional gradient buffer
- Tape: ordered record of primitive applications (thread-local, opened with `with Tape():`)
- Primitives: arithmetic, matmul, shape ops, elementwise nonlinearities, reductions,
  softmax and layer normalization
- backward(): populates .grad on every requires_grad leaf used by the tape
- finite_difference_check(): central-difference oracle for any scalar function

Primitives only record while a tape is active on the current thread and at least
one input requires a gradient (or was itself recorded). Outside a tape they are
plain numpy evaluation, which is what retrieval and evaluation use.
"""

import threading
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .exceptions import (
    DetachedRootError,
    DomainViolationError,
    NonFiniteError,
    ShapeMismatchError,
)

LAYER_NORM_EPS = 1e-5
ATANH_LIMIT = 1.0 - 1e-7

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape():
    """Return the innermost tape open on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    Dense real-valued array.

    data is always a float64 numpy array; grad, once populated by backward(),
    has the same shape. Tensors that are not recorded on a tape are treated as
    immutable values and may be shared between threads.
    """

    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor operator

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._generation = -1
        self._index = -1

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
    def T(self) -> 'Tensor':
        return swap_last(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def is_recorded_on(self, tape) -> bool:
        return self._tape is tape and self._generation == tape.generation

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap scalars and arrays as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Node:
    __slots__ = ('out', 'parents', 'backward_fn', 'op')

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """
    Ordered record of primitive applications.

    Nodes are appended as primitives run, so every node's parents precede it.
    A tape is bound to the thread that opened it; distinct models may train on
    distinct threads, each with its own tape.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.generation = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def participates(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or tensor.is_recorded_on(self)

    def record(self, out: Tensor, parents: tuple, backward_fn, op: str) -> None:
        for parent in parents:
            if parent.requires_grad and not parent.is_recorded_on(self):
                self.leaves[id(parent)] = parent
        out._tape = self
        out._generation = self.generation
        out._index = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward_fn, op))

    def reset(self) -> None:
        """Drop all nodes; tensors recorded before the reset become detached."""
        self.nodes = []
        self.leaves = {}
        self.generation += 1


def _finite_or_raise(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return data


def _result(data, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(_finite_or_raise(np.asarray(data, dtype=np.float64), op))
    tape = active_tape()
    if tape is not None and any(tape.participates(p) for p in parents):
        tape.record(out, parents, backward_fn, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# =============================================================================
# Arithmetic
# =============================================================================

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, 'add')


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'sub')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, 'sub')


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, 'mul')


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'div')
    if np.any(b.data == 0.0):
        raise DomainViolationError("div: division by zero")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward, 'div')


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), 'neg')


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Batched matrix product over the last two axes (leading axes broadcast).

    Raises:
        ShapeMismatchError: If either operand has fewer than 2 axes or the
            contraction sizes differ
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs 2+ axes, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul contraction mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, 'matmul')


# =============================================================================
# Shape ops
# =============================================================================

def transpose(a: TensorLike, axes: Sequence[int] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), 'transpose')


def swap_last(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatchError(f"transpose of last axes needs 2+ axes, got {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: TensorLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.reshape(a.data, shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"reshape: {a.shape} -> {shape}") from exc
    return _result(out.copy(), (a,), lambda g: (np.reshape(g, a.shape),), 'reshape')


def broadcast_to(a: TensorLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"broadcast_to: {a.shape} -> {shape}") from exc
    return _result(np.array(out), (a,), lambda g: (_unbroadcast(g, a.shape),), 'broadcast_to')


def getitem(a: TensorLike, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(a.data[index]), (a,), backward, 'getitem')


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeMismatchError(f"concat along axis {axis}: {shapes}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, backward, 'concat')


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"stack: {[t.shape for t in tensors]}") from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward, 'stack')


def where(mask: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    """Select a where mask is true, else b. mask is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _result(np.where(mask, a.data, b.data), (a, b), backward, 'where')


# =============================================================================
# Elementwise nonlinearities
# =============================================================================

def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), 'tanh')


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), 'sigmoid')


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * s,), 'softplus')


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), 'exp')


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainViolationError("log requires strictly positive inputs")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def cosh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.cosh(a.data), (a,), lambda g: (g * np.sinh(a.data),), 'cosh')


def sinh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.sinh(a.data), (a,), lambda g: (g * np.cosh(a.data),), 'sinh')


def atanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if np.any(np.abs(a.data) >= 1.0):
        raise DomainViolationError("atanh requires inputs strictly inside (-1, 1)")
    return _result(np.arctanh(a.data), (a,), lambda g: (g / (1.0 - a.data * a.data),), 'atanh')


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainViolationError("sqrt requires non-negative inputs")
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g * 0.5 / y,), 'sqrt')


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), 'square')


def tabs(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), 'abs')


def clamp(a: TensorLike, lo: float = None, hi: float = None) -> Tensor:
    """Hard clamp; the gradient is zero wherever the bound is active."""
    a = as_tensor(a)
    lower = -np.inf if lo is None else lo
    upper = np.inf if hi is None else hi
    inside = (a.data >= lower) & (a.data <= upper)
    return _result(np.clip(a.data, lower, upper), (a,), lambda g: (g * inside,), 'clamp')


# =============================================================================
# Reductions and normalizations
# =============================================================================

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _result(out, (a,), lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),), 'sum')


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return _result(out, (a,), backward, 'mean')


def tmax(a: TensorLike, axis: int = None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient flows to the first maximizing entry only."""
    a = as_tensor(a)
    out = np.max(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        grad = np.zeros_like(a.data)
        if axis is None:
            grad.flat[np.argmax(a.data)] = float(np.sum(g))
            return (grad,)
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        g_full = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, idx, g_full, axis=axis)
        return (grad,)

    return _result(out, (a,), backward, 'max')


def l2_norm(a: TensorLike, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along an axis; the gradient at a zero vector is taken as zero."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.where(n > 0.0, n, 1.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def backward(g):
        g_full = g if keepdims else np.expand_dims(g, axis)
        return (np.where(n > 0.0, g_full * a.data / safe, 0.0),)

    return _result(out, (a,), backward, 'l2_norm')


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (a,), backward, 'softmax')


def layer_norm(a: TensorLike, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """(x - mean) / sqrt(var + eps) along an axis, without affine parameters."""
    a = as_tensor(a)
    mu = np.mean(a.data, axis=axis, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        g_mean = np.mean(g, axis=axis, keepdims=True)
        gx_mean = np.mean(g * xhat, axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _result(xhat, (a,), backward, 'layer_norm')


# =============================================================================
# Differentiation
# =============================================================================

def backward(root: Tensor) -> None:
    """
    Populate .grad on every requires_grad leaf the root's tape recorded.

    The tape is reset afterwards. A constant root evaluated while a tape is
    active leaves all of that tape's leaf gradients at zero.

    Raises:
        ShapeMismatchError: If root is not a scalar
        DetachedRootError: If no tape recorded root and none is active
    """
    if root.shape != ():
        raise ShapeMismatchError(f"backward needs a scalar root, got shape {root.shape}")

    tape = root._tape if root._tape is not None else active_tape()
    if tape is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.data)
            return
        raise DetachedRootError("root was not recorded on any tape")
    if root._tape is not None and not root.is_recorded_on(tape):
        raise DetachedRootError("root belongs to a tape that was already consumed")

    for leaf in tape.leaves.values():
        leaf.grad = np.zeros_like(leaf.data)
    if root.requires_grad and not root.is_recorded_on(tape):
        root.grad = np.ones_like(root.data)

    if root.is_recorded_on(tape):
        pending = {id(root): np.ones_like(root.data)}
        for index in range(root._index, -1, -1):
            node = tape.nodes[index]
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
                if parent_grad is None:
                    continue
                if parent.is_recorded_on(tape):
                    key = id(parent)
                    pending[key] = pending[key] + parent_grad if key in pending else parent_grad
                elif parent.requires_grad:
                    parent.grad = parent.grad + parent_grad

    tape.reset()


def value_and_grad(f: Callable[[], Tensor], params: Iterable[Tensor]) -> tuple:
    """Evaluate f() on a fresh tape and return (value, [grad per param])."""
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        root = f()
        backward(root)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    return float(root.data), grads


def finite_difference_check(f: Callable[..., Tensor], theta, h: float = 1e-5) -> float:
    """
    Compare autodiff gradients with central differences.

    Args:
        f: Deterministic scalar-valued function, called as f(*params)
        theta: A Tensor or a sequence of Tensors to differentiate against
        h: Central-difference step

    Returns:
        max over all parameter entries of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)

    Raises:
        NonFiniteError: If f is non-finite at a perturbed point
    """
    params = [theta] if isinstance(theta, Tensor) else list(theta)
    if h <= 0:
        raise ValueError("finite difference step must be positive")

    saved_flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        _, analytic = value_and_grad(lambda: f(*params), params)
        worst = 0.0
        for p, g_ad in zip(params, analytic):
            for idx in np.ndindex(*p.shape):
                original = p.data[idx]
                p.data[idx] = original + h
                f_plus = float(f(*params).data)
                p.data[idx] = original - h
                f_minus = float(f(*params).data)
                p.data[idx] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NonFiniteError(f"f is non-finite near parameter index {idx}")
                g_fd = (f_plus - f_minus) / (2.0 * h)
                a = float(g_ad[idx])
                worst = max(worst, abs(a - g_fd) / max(1.0, abs(a), abs(g_fd)))
        return worst
    finally:
        for p, flag in zip(params, saved_flags):
            p.requires_grad = flag
