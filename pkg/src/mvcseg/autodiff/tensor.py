"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive is a pair of numpy functions registered in ``PRIMITIVES``.
Applying a primitive to tensors that require gradients links the output to a
``Node``; ``backward`` walks those nodes in reverse topological order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NumericDomainError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    # forward(arrays, **attrs) -> (out, saved)
    forward: Callable
    # backward(grad_out, arrays, out, saved, **attrs) -> per-input grads (None = no grad)
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without linking outputs into the reverse graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def register(name: str, forward: Callable, backward: Callable) -> Primitive:
    prim = Primitive(name, forward, backward)
    PRIMITIVES[name] = prim
    return prim


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    attrs: dict
    saved: object = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: Node | None = None
        self.name = name

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, other])

    __rmul__ = __mul__

    def __neg__(self):
        return apply_primitive("neg", [self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_primitive(op: str, inputs: Sequence, **attrs) -> Tensor:
    """Run primitive ``op`` forward and link the result for the reverse pass."""
    prim = PRIMITIVES[op]
    tensors = tuple(as_tensor(t) for t in inputs)
    out_arr, saved = prim.forward([t.data for t in tensors], **attrs)
    out = Tensor.__new__(Tensor)
    out.data = out_arr
    out.name = None
    out.grad = None
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
    out._node = Node(op, tensors, attrs, saved) if out.requires_grad else None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, grad_scale: float = 1.0) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ValueError("backward called on a tensor that is not part of a recorded computation")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, float(grad_scale))}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad += g
            continue
        prim = PRIMITIVES[node.op]
        in_grads = prim.backward(g, [p.data for p in node.inputs], t.data, node.saved, **node.attrs)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# computation record


@dataclass
class RecordEntry:
    op: str
    input_ids: tuple
    output_id: int
    attrs: dict
    saved: object = None


@dataclass
class ComputationRecord:
    entries: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)  # id -> array
    outputs: dict = field(default_factory=dict)  # id -> array (forward values)

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every entry from the stored leaves, in record order."""
        values = dict(self.leaves)
        for e in self.entries:
            out, _ = PRIMITIVES[e.op].forward([values[i] for i in e.input_ids], **e.attrs)
            values[e.output_id] = out
        return values


def record_of(root: Tensor) -> ComputationRecord:
    """Topologically ordered record of everything ``root`` depends on."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    rec = ComputationRecord()
    for t in order:
        if t._node is None:
            rec.leaves[id(t)] = t.data
        else:
            n = t._node
            rec.entries.append(RecordEntry(n.op, tuple(id(p) for p in n.inputs), id(t), n.attrs, n.saved))
            rec.outputs[id(t)] = t.data
    return rec


# ---------------------------------------------------------------------------
# primitive definitions


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def _add_fwd(arrs):
    a, b = arrs
    _broadcast_check("add", a, b)
    return a + b, None


def _add_bwd(g, arrs, out, saved):
    a, b = arrs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(arrs):
    a, b = arrs
    _broadcast_check("sub", a, b)
    return a - b, None


def _sub_bwd(g, arrs, out, saved):
    a, b = arrs
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_fwd(arrs):
    a, b = arrs
    _broadcast_check("mul", a, b)
    return a * b, None


def _mul_bwd(g, arrs, out, saved):
    a, b = arrs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_fwd(arrs):
    a, b = arrs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


def _matmul_bwd(g, arrs, out, saved):
    a, b = arrs
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _relu_fwd(arrs):
    (a,) = arrs
    return np.maximum(a, 0.0), None


def _relu_bwd(g, arrs, out, saved):
    return (g * (arrs[0] > 0),)


def _sigmoid_fwd(arrs):
    (a,) = arrs
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out, None


def _sigmoid_bwd(g, arrs, out, saved):
    return (g * out * (1.0 - out),)


def _require_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise NumericDomainError(f"{name}: non-finite input")


def _softmax_fwd(arrs):
    (a,) = arrs
    _require_finite("softmax", a)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, arrs, out, saved):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(arrs):
    (a,) = arrs
    _require_finite("log_softmax", a)
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), None


def _log_softmax_bwd(g, arrs, out, saved):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _softplus_fwd(arrs):
    (a,) = arrs
    return np.logaddexp(0.0, a), None


def _softplus_bwd(g, arrs, out, saved):
    return (g * _sigmoid_fwd(arrs)[0],)


def _exp_fwd(arrs):
    return np.exp(arrs[0]), None


def _exp_bwd(g, arrs, out, saved):
    return (g * out,)


def _log_fwd(arrs):
    (a,) = arrs
    _require_finite("log", a)
    return np.log(np.maximum(a, LOG_FLOOR)), None


def _log_bwd(g, arrs, out, saved):
    a = arrs[0]
    return (np.where(a > LOG_FLOOR, g / np.maximum(a, LOG_FLOOR), 0.0),)


def _neg_fwd(arrs):
    return -arrs[0], None


def _neg_bwd(g, arrs, out, saved):
    return (-g,)


def _sum_fwd(arrs, axis=None, keepdims=False):
    out = arrs[0].sum(axis=axis, keepdims=keepdims)
    return np.atleast_1d(out), None


def _expand_reduced(g, shape, axis, keepdims):
    # keepdims is irrelevant: the reduced axes are restored from the input shape
    axes = range(len(shape)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    kept = list(shape)
    for ax in axes:
        kept[ax] = 1
    return np.broadcast_to(g.reshape(kept), shape)


def _sum_bwd(g, arrs, out, saved, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, arrs[0].shape, axis, keepdims)),)


def _mean_fwd(arrs, axis=None, keepdims=False):
    return np.atleast_1d(arrs[0].mean(axis=axis, keepdims=keepdims)), None


def _mean_bwd(g, arrs, out, saved, axis=None, keepdims=False):
    a = arrs[0]
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / n,)


def _transpose_fwd(arrs, axes=None):
    return np.ascontiguousarray(np.transpose(arrs[0], axes)), None


def _transpose_bwd(g, arrs, out, saved, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (np.transpose(g, inv),)


def _reshape_fwd(arrs, shape=None):
    a = arrs[0]
    try:
        return a.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None


def _reshape_bwd(g, arrs, out, saved, shape=None):
    return (g.reshape(arrs[0].shape),)


def _concat_fwd(arrs, axis=-1):
    ref = list(arrs[0].shape)
    for a in arrs[1:]:
        other = list(a.shape)
        if len(other) != len(ref) or (other[:axis] + other[axis:][1:]) != (ref[:axis] + ref[axis:][1:]):
            raise ShapeError(f"concat: incompatible shapes {arrs[0].shape} and {a.shape}")
    return np.concatenate(arrs, axis=axis), None


def _concat_bwd(g, arrs, out, saved, axis=-1):
    cuts = np.cumsum([a.shape[axis] for a in arrs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _take_rows_fwd(arrs, index=None):
    a = arrs[0]
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for shape {a.shape}")
    return a[index], None


def _take_rows_bwd(g, arrs, out, saved, index=None):
    ga = np.zeros_like(arrs[0])
    np.add.at(ga, index, g)
    return (ga,)


register("add", _add_fwd, _add_bwd)
register("sub", _sub_fwd, _sub_bwd)
register("mul", _mul_fwd, _mul_bwd)
register("neg", _neg_fwd, _neg_bwd)
register("matmul", _matmul_fwd, _matmul_bwd)
register("relu", _relu_fwd, _relu_bwd)
register("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
register("softmax", _softmax_fwd, _softmax_bwd)
register("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
register("softplus", _softplus_fwd, _softplus_bwd)
register("exp", _exp_fwd, _exp_bwd)
register("log", _log_fwd, _log_bwd)
register("sum", _sum_fwd, _sum_bwd)
register("mean", _mean_fwd, _mean_bwd)
register("transpose", _transpose_fwd, _transpose_bwd)
register("reshape", _reshape_fwd, _reshape_bwd)
register("concat", _concat_fwd, _concat_bwd)
register("take_rows", _take_rows_fwd, _take_rows_bwd)


# functional front-end


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", [a, b])


def relu(x) -> Tensor:
    return apply_primitive("relu", [x])


def sigmoid(x) -> Tensor:
    return apply_primitive("sigmoid", [x])


def softmax(x) -> Tensor:
    return apply_primitive("softmax", [x])


def log_softmax(x) -> Tensor:
    return apply_primitive("log_softmax", [x])


def softplus(x) -> Tensor:
    return apply_primitive("softplus", [x])


def exp(x) -> Tensor:
    return apply_primitive("exp", [x])


def log(x) -> Tensor:
    return apply_primitive("log", [x])


def tsum(x, axis=None, keepdims=False) -> Tensor:
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None and x.ndim == 2:
        axes = (1, 0)
    return apply_primitive("transpose", [x], axes=axes)


def reshape(x, shape) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = list(xs)
    if len(xs) == 1:
        return as_tensor(xs[0])
    return apply_primitive("concat", xs, axis=axis)


def take_rows(x, index) -> Tensor:
    """Gather rows of ``x``; a boolean ``index`` selects the rows it marks."""
    index = np.asarray(index)
    if index.dtype == bool:
        index = np.flatnonzero(index)
    return apply_primitive("take_rows", [x], index=index.astype(np.int64))
