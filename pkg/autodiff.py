"""
autodiff.py

Reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a Tensor that keeps references to its inputs and a
closure mapping the output gradient to input gradients. backward() walks the
recorded graph once, in reverse topological order, and returns the gradient
of a scalar root with respect to every leaf that requires it.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DegenerateStateError, NonFiniteError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    """Return True when new operations are recorded for backward."""
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (per thread)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """
    A dense real array plus the bookkeeping needed for reverse-mode AD.

    Attributes:
        value: The forward value (numpy floating array, any rank)
        grad: Gradient written by backward() on leaves, else None
        op: Tag of the operation that produced this tensor ("leaf" for inputs)
        requires_grad: Whether gradients flow to this tensor
    """

    __slots__ = ("value", "grad", "op", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(value, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.value = array
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{label})"


def parameter(value, name: Optional[str] = None, dtype=None) -> Tensor:
    """Create a leaf tensor that receives gradients (copies its value)."""
    return Tensor(np.array(value, dtype=dtype, copy=True), requires_grad=True, name=name)


def constant(value, like: Optional[Tensor] = None) -> Tensor:
    """Create a non-differentiable tensor, matching the dtype of `like`."""
    return Tensor(value, dtype=like.dtype if like is not None else None)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, like)


def _result(value: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(value)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_check(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.value + b.value, (a, b), backward, "add")


def subtract(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_check(a, b, "subtract")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.value - b.value, (a, b), backward, "subtract")


def multiply(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_check(a, b, "multiply")

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _result(a.value * b.value, (a, b), backward, "multiply")


def divide(a, b) -> Tensor:
    """Elementwise a / b; a zero divisor raises DegenerateStateError."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_check(a, b, "divide")
    if np.any(b.value == 0):
        raise DegenerateStateError("division by zero in divide")

    def backward(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        )

    return _result(a.value / b.value, (a, b), backward, "divide")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    a = _wrap(a)
    c = a.value.dtype.type(factor)

    def backward(g):
        return (g * c,)

    return _result(a.value * c, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is 0."""
    mask = a.value > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, a.value, 0).astype(a.dtype), (a,), backward, "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward, "exp")


def square(a: Tensor) -> Tensor:
    def backward(g):
        return (2 * g * a.value,)

    return _result(a.value * a.value, (a,), backward, "square")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """
    Matrix product with numpy batching rules.

    Both operands must have rank >= 2; leading dimensions broadcast, so a
    (B, N, N) stack times a (B, N, 1) stack is a batched matrix-vector product.
    """
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(value, (a, b), backward, "matmul")


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """
    Squared euclidean distances between the rows of a (m, n) and b (k, n).

    Returns:
        (m, k) tensor with entry [i, j] = ||a_i - b_j||^2
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist: shapes {a.shape} and {b.shape} do not conform")
    sa = np.sum(a.value * a.value, axis=1)
    sb = np.sum(b.value * b.value, axis=1)
    value = sa[:, None] + sb[None, :] - 2.0 * (a.value @ b.value.T)

    def backward(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * a.value - g @ b.value)
        gb = 2.0 * (g.sum(axis=0)[:, None] * b.value - g.T @ a.value)
        return ga, gb

    return _result(value, (a, b), backward, "pairwise_sqdist")


def l2norm(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over `axis` (all elements when None). Gradient is 0 where the norm is 0."""
    norm_k = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=True))
    if keepdims:
        value = norm_k
    else:
        value = norm_k.reshape(np.sum(a.value, axis=axis).shape)

    def backward(g):
        g_k = np.reshape(g, norm_k.shape)
        positive = norm_k > 0
        safe = np.where(positive, norm_k, 1)
        return (np.where(positive, g_k / safe, 0) * a.value,)

    return _result(value, (a,), backward, "l2norm")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    kept_shape = np.sum(a.value, axis=axis, keepdims=True).shape

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept_shape), a.shape).copy(),)

    return _result(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    kept_shape = np.sum(a.value, axis=axis, keepdims=True).shape
    count = a.size // int(np.prod(kept_shape))
    if count == 0:
        raise ShapeError("mean over an empty axis")

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept_shape) / count, a.shape).copy(),)

    return _result(np.mean(a.value, axis=axis, keepdims=keepdims), (a,), backward, "mean")


def variance(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count)."""
    kept_shape = np.sum(a.value, axis=axis, keepdims=True).shape
    count = a.size // int(np.prod(kept_shape))
    if count == 0:
        raise ShapeError("variance over an empty axis")
    centred = a.value - np.mean(a.value, axis=axis, keepdims=True)

    def backward(g):
        return (np.reshape(g, kept_shape) * 2.0 * centred / count,)

    value = np.mean(centred * centred, axis=axis, keepdims=keepdims)
    return _result(value, (a,), backward, "variance")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(value, (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not conform on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(value, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    try:
        value = np.stack([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"stack: shapes {shapes} differ") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(value, tuple(tensors), backward, "stack")


def take(a: Tensor, indices) -> Tensor:
    """Gather along the first axis; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    value = np.take(a.value, idx, axis=0)

    def backward(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, idx, g)
        return (grad,)

    return _result(value, (a,), backward, "take")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(root: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Propagate d(root)/d(node) through the recorded graph.

    Args:
        root: Scalar-valued tensor

    Returns:
        Mapping from every reachable leaf with requires_grad to its gradient.
        The same arrays are stored on each leaf's `.grad`.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: Dict[Tensor, np.ndarray] = {}
    if not root.requires_grad:
        return leaves

    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    return leaves


def finite_difference_gradient(fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-6) -> np.ndarray:
    """
    Central finite-difference estimate of d fn() / d leaf.

    The leaf value is perturbed in place and restored afterwards.
    """
    grad = np.zeros_like(leaf.value)
    flat = leaf.value.reshape(-1)
    grad_flat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = fn().item()
            flat[i] = original - step
            lower = fn().item()
            flat[i] = original
            grad_flat[i] = (upper - lower) / (2 * step)
    return grad
