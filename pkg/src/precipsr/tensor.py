"""Minimal reverse-mode automatic differentiation over dense float32 arrays.

Tensors store 32-bit data. Operations compute in float64 where they
accumulate (reductions, matmul, convolutions) and cast the result back.
Every differentiable operation appends a node to the active :class:`Tape`
(if any) and links the node to its output tensor, so :func:`backward` can
walk either an explicit tape or the graph hanging off the loss.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32
ACC = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextmanager
def storage_precision(dtype):
    """Temporarily store new tensors as ``dtype`` (float64 for finite-difference checks).

    Process-wide; existing tensors keep their data until reassigned.
    """
    global DTYPE
    prev, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class AxisError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn


@dataclass(eq=False)
class Tape:
    """Ordered record of the operations of one forward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[Tape] = []
        self.grad_enabled = True


_local = _State()


def _state() -> _State:
    return _local


@contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.ndim else arr.reshape(1)
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` as a tensor and register its gradient rule.

    ``backward_fn`` receives the upstream gradient (float64, output shape) and
    returns one gradient per input, or ``None`` for inputs it does not feed.
    """
    out_data = np.asarray(out_data)
    if out_data.dtype != DTYPE:
        out_data = out_data.astype(DTYPE)
    if not np.isfinite(out_data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor._wrap(out_data)
    st = _state()
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward_fn)
        out._node = node
        if st.tapes:
            st.tapes[-1].nodes.append(node)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes along which an input of ``shape`` was broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), a.data * b.data, bw)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return record("relu", (a,), np.where(pos, a.data, 0).astype(DTYPE), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data.astype(ACC)
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def log1p(a: Tensor) -> Tensor:
    if np.any(a.data < -1):
        raise DomainError("log1p input below -1")
    x = a.data.astype(ACC)
    return record("log1p", (a,), np.log1p(x), lambda g: (g / (1.0 + x),))


def expm1(a: Tensor) -> Tensor:
    y = np.expm1(a.data.astype(ACC))
    return record("expm1", (a,), y, lambda g: (g * (y + 1.0),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "log1p": log1p, "expm1": expm1}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# --- reductions ------------------------------------------------------------

def _norm_axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axes {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op_kind: str, a: Tensor, axes=None) -> Tensor:
    """Reduce over ``axes`` keeping them as extent-1 axes."""
    axes = _norm_axes(a.ndim, axes)
    x = a.data.astype(ACC)
    if op_kind == "sum":
        return record("sum", (a,), x.sum(axis=axes, keepdims=True),
                      lambda g: (np.broadcast_to(g, a.shape),))
    if op_kind == "mean":
        count = int(np.prod([a.shape[i] for i in axes]))
        return record("mean", (a,), x.mean(axis=axes, keepdims=True),
                      lambda g: (np.broadcast_to(g / count, a.shape),))
    if op_kind == "max":
        keep = [i for i in range(a.ndim) if i not in axes]
        perm = keep + list(axes)
        moved = np.transpose(x, perm)
        kept_shape = moved.shape[:len(keep)]
        flat = moved.reshape(kept_shape + (-1,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)
        out_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

        def bw(g):
            gflat = np.zeros(flat.shape, dtype=ACC)
            np.put_along_axis(gflat, idx[..., None], g.reshape(kept_shape + (1,)), axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(perm)),)

        return record("max", (a,), out.reshape(out_shape), bw)
    raise ValueError(f"unknown reduction {op_kind!r}")


def sum_(a: Tensor, axes=None) -> Tensor:
    return reduce("sum", a, axes)


def mean(a: Tensor, axes=None) -> Tensor:
    return reduce("mean", a, axes)


def max_(a: Tensor, axes=None) -> Tensor:
    return reduce("max", a, axes)


# --- structural ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    A = a.data.astype(ACC)
    B = b.data.astype(ACC)

    def bw(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return record("matmul", (a, b), A @ B, bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    ndim = tensors[0].ndim
    axis = _norm_axes(ndim, axis)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat shape mismatch off axis {axis}: {t.shape} vs {tensors[0].shape}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def window2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Read an NHWC spatial window; positions outside ``x`` read as zero.

    Negative offsets or windows larger than ``x`` pad, smaller ones crop.
    """
    n, h, w, c = x.shape
    out = np.zeros((n, height, width, c), dtype=DTYPE)
    src_r = slice(max(top, 0), min(top + height, h))
    src_c = slice(max(left, 0), min(left + width, w))
    dst_r = slice(src_r.start - top, src_r.stop - top)
    dst_c = slice(src_c.start - left, src_c.stop - left)
    if src_r.stop > src_r.start and src_c.stop > src_c.start:
        out[:, dst_r, dst_c] = x.data[:, src_r, src_c]

    def bw(g):
        gx = np.zeros(x.shape, dtype=ACC)
        if src_r.stop > src_r.start and src_c.stop > src_c.start:
            gx[:, src_r, src_c] = g[:, dst_r, dst_c]
        return (gx,)

    return record("window2d", (x,), out, bw)


# --- backward --------------------------------------------------------------

def _graph_order(loss: Tensor) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(loss._node, False)] if loss._node is not None else []
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append((t._node, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    With a tape, nodes are visited in reverse insertion order; otherwise the
    graph reachable from ``loss`` is sorted topologically.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = tape.nodes if tape is not None else _graph_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=ACC)}
    leaves: dict[int, Tensor] = {}
    if loss._node is None:
        leaves[id(loss)] = loss
    for node in reversed(nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=ACC)
            if t._node is None:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(np.broadcast_to(g, t.shape), dtype=DTYPE)
        t.grad = g.copy() if t.grad is None else t.grad + g
