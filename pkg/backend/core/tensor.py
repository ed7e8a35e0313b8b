"""
Tensor engine for ArtiField
Dense float64 arrays with a reverse-mode tape

Backward rules are written in terms of Tensor operations. Running a backward
pass with ``create_graph=True`` therefore records the backward pass itself on
the tape, which is how second-order terms (gradients of input-gradients, as
needed by the Eikonal loss) are differentiated.

Tape order is creation order: every node gets a monotonically increasing id,
and parents are always created before their children, so walking nodes by
descending id is a reverse topological traversal.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_NORM_FLOOR = 1e-12

_node_ids = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool) -> Iterator[None]:
    previous = is_grad_enabled()
    _grad_state.enabled = enabled
    try:
        yield
    finally:
        _grad_state.enabled = previous


def no_grad():
    """Context manager: operations inside are not recorded (thread-local)."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


@dataclass
class TapeNode:
    """One recorded operation: its kind, its inputs and its backward rule."""

    op: str
    parents: Tuple["Tensor", ...]
    backward: Callable[["Tensor", "Tensor"], Sequence[Optional["Tensor"]]]


class Tensor:
    """Dense float64 array that can record the operations applied to it."""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node: Optional[TapeNode] = None
        self.id = next(_node_ids)

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{label}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    # -- method forms -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        return swapaxes(self, axis1, axis2)

    def exp(self) -> "Tensor":
        return exp(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf on the tape."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() called on a tensor that is not attached to the tape")
        leaves = [t for t in _topological_order([self]) if t.node is None]
        grads = grad([self], leaves)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Create a trainable leaf holding a private copy of ``data``."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[Tensor, Tensor], Sequence[Optional[Tensor]]]) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(parents), backward)
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- broadcasting ----------------------------------------------------------

def _sum_to_array(arr: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = arr.ndim - len(shape)
    if extra > 0:
        arr = arr.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr.reshape(shape)


def sum_to(t: Tensor, shape: Sequence[int]) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    shape = tuple(shape)
    if t.shape == shape:
        return t
    return _make("sum_to", _sum_to_array(t.data, shape), (t,),
                 lambda g, out: (broadcast_to(g, t.shape),))


def broadcast_to(t: ArrayLike, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    shape = tuple(shape)
    if t.shape == shape:
        return t
    try:
        data = np.broadcast_to(t.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {t.shape} to {shape}") from None
    return _make("broadcast_to", data, (t,), lambda g, out: (sum_to(g, t.shape),))


# -- elementwise binary -------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g: Tensor, out: Tensor):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g: Tensor, out: Tensor):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(neg(g), b.shape) if b.requires_grad else None)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g: Tensor, out: Tensor):
        return (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                sum_to(mul(g, a), b.shape) if b.requires_grad else None)

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g: Tensor, out: Tensor):
        return (sum_to(div(g, b), a.shape) if a.requires_grad else None,
                sum_to(neg(mul(g, div(out, b))), b.shape) if b.requires_grad else None)

    return _make("div", data, (a, b), backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g, out: (neg(g),))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data ** exponent

    def backward(g: Tensor, out: Tensor):
        if exponent == 1.0:
            return (g,)
        return (mul(g, mul(exponent, power(a, exponent - 1.0))),)

    return _make("pow", data, (a,), backward)


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from ``a`` where the constant ``mask`` is true, else from ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    keep = mask.astype(np.float64)

    def backward(g: Tensor, out: Tensor):
        return (sum_to(mul(g, keep), a.shape) if a.requires_grad else None,
                sum_to(mul(g, 1.0 - keep), b.shape) if b.requires_grad else None)

    return _make("where", np.where(mask, a.data, b.data), (a, b), backward)


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = (a.data > floor).astype(np.float64)
    return _make("clamp_min", np.maximum(a.data, floor), (a,), lambda g, out: (mul(g, keep),))


# -- linear algebra -------------------------------------------------------

def swapaxes(a: ArrayLike, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    return _make("swapaxes", np.swapaxes(a.data, axis1, axis2), (a,),
                 lambda g, out: (swapaxes(g, axis1, axis2),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes; a 1-D right operand is a column."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim < 2:
        raise ShapeError(f"matmul: left operand must be at least 2-D, got {a.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g: Tensor, out: Tensor):
        ga = sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swapaxes(a, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", data, (a, b), backward)


# -- elementwise unary --------------------------------------------------------

def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make("exp", data, (a,), lambda g, out: (mul(g, out),))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), lambda g, out: (div(g, a),))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _make("sqrt", data, (a,), lambda g, out: (div(mul(g, 0.5), out),))


def sin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g, out: (mul(g, cos(a)),))


def cos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g, out: (neg(mul(g, sin(a))),))


def tabs(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g, out: (mul(g, sign),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make("relu", a.data * mask, (a,), lambda g, out: (mul(g, mask),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", data, (a,), lambda g, out: (mul(g, mul(out, sub(1.0, out))),))


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("softplus", np.logaddexp(0.0, a.data), (a,), lambda g, out: (mul(g, sigmoid(a)),))


# -- reductions -----------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand(g: Tensor, shape: Tuple[int, ...], axis, keepdims: bool) -> Tensor:
    """Undo a reduction: reinsert reduced axes and broadcast back to ``shape``."""
    if not keepdims:
        axes = _normalize_axes(axis, len(shape))
        kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
        g = reshape(g, kept)
    return broadcast_to(g, shape)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                 lambda g, out: (_expand(g, a.shape, axis, keepdims),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = 1
    for ax in _normalize_axes(axis, a.ndim):
        count *= a.shape[ax]
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {a.shape}")
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


def norm(a: ArrayLike, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    a = as_tensor(a)
    data = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=keepdims))

    def backward(g: Tensor, out: Tensor):
        g_full = _expand(g, a.shape, axis, keepdims)
        n_full = _expand(out, a.shape, axis, keepdims)
        return (div(mul(g_full, a), clamp_min(n_full, _NORM_FLOOR)),)

    return _make("norm", data, (a,), backward)


def l1_norm(a: ArrayLike, axis=-1, keepdims: bool = False) -> Tensor:
    return tsum(tabs(a), axis=axis, keepdims=keepdims)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


# -- shape manipulation -----------------------------------------------------

def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make("reshape", data, (a,), lambda g, out: (reshape(g, a.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(item, (int, np.integer, slice)) or item is Ellipsis for item in items)


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, np.ndarray) and index.dtype == bool:
        index = np.nonzero(index)
    return _make("getitem", np.asarray(a.data[index]), (a,),
                 lambda g, out: (scatter(g, a.shape, index),))


def scatter(values: ArrayLike, shape: Sequence[int], index) -> Tensor:
    """Zeros of ``shape`` with ``values`` added at ``index`` (repeated indices accumulate)."""
    values = as_tensor(values)
    data = np.zeros(tuple(shape))
    if _is_basic_index(index):
        data[index] += values.data
    else:
        np.add.at(data, index, values.data)
    return _make("scatter", data, (values,), lambda g, out: (getitem(g, index),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g: Tensor, out: Tensor):
        grads = []
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            index = (slice(None),) * ax + (slice(int(start), int(stop)),)
            grads.append(getitem(g, index))
        return grads

    return _make("concat", data, tensors, backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"stack: shapes differ {shapes}") from None
    ax = axis % data.ndim

    def backward(g: Tensor, out: Tensor):
        return [getitem(g, (slice(None),) * ax + (i,)) if t.requires_grad else None
                for i, t in enumerate(tensors)]

    return _make("stack", data, tensors, backward)


# -- differentiation ------------------------------------------------------------

def _topological_order(outputs: Sequence[Tensor]) -> List[Tensor]:
    """All tensors on the tape behind ``outputs``, children before parents."""
    seen: Dict[int, Tensor] = {}
    stack_: List[Tensor] = [t for t in outputs if t.requires_grad]
    while stack_:
        t = stack_.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        if t.node is not None:
            stack_.extend(p for p in t.node.parents if p.requires_grad and p.id not in seen)
    return [seen[key] for key in sorted(seen, reverse=True)]


def grad(outputs: Sequence[Tensor], inputs: Sequence[Tensor],
         grad_outputs: Optional[Sequence[ArrayLike]] = None,
         create_graph: bool = False, allow_unused: bool = True) -> List[Tensor]:
    """Vector-Jacobian products of ``outputs`` with respect to ``inputs``.

    Args:
        outputs: tensors to differentiate
        inputs: tensors to differentiate with respect to (leaves or intermediates)
        grad_outputs: seeds, default ones
        create_graph: record the backward pass so the result can be differentiated again
        allow_unused: return zeros for inputs the outputs do not depend on

    Returns:
        One gradient tensor per input, shaped like the input
    """
    outputs = list(outputs)
    inputs = list(inputs)
    if grad_outputs is None:
        grad_outputs = [np.ones(out.shape) for out in outputs]
    if not any(out.requires_grad for out in outputs):
        if not allow_unused:
            raise GraphError("outputs are not attached to the tape")
        return [Tensor(np.zeros(x.shape)) for x in inputs]

    wanted = {x.id for x in inputs}
    grads: Dict[int, Tensor] = {}
    for out, seed in zip(outputs, grad_outputs):
        if not out.requires_grad:
            continue
        seed = as_tensor(seed)
        if seed.shape != out.shape:
            raise ShapeError(f"grad seed shape {seed.shape} does not match output {out.shape}")
        grads[out.id] = seed if out.id not in grads else add(grads[out.id], seed)

    with _grad_mode(create_graph):
        for t in _topological_order(outputs):
            g = grads.get(t.id) if t.id in wanted else grads.pop(t.id, None)
            if g is None or t.node is None:
                continue
            parent_grads = t.node.backward(g, t)
            for parent, pg in zip(t.node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                previous = grads.get(parent.id)
                grads[parent.id] = pg if previous is None else add(previous, pg)

    result = []
    for x in inputs:
        g = grads.get(x.id)
        if g is None:
            if not allow_unused:
                raise GraphError(f"input {x!r} is not reachable from the outputs")
            g = Tensor(np.zeros(x.shape))
        result.append(g)
    return result


def backward(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of a scalar loss with respect to each parameter (zeros when unused)."""
    if loss.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    return [g.data for g in grad([loss], params)]


def describe_tape(output: Tensor) -> List[Tuple[str, Tuple[Tuple[int, ...], ...]]]:
    """Op kinds and parent shapes on the tape behind ``output``, in tape order."""
    nodes = [t for t in reversed(_topological_order([output])) if t.node is not None]
    return [(t.node.op, tuple(p.shape for p in t.node.parents)) for t in nodes]
