"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive evaluated on tensors that belong to
it. Tensors created without a tape are plain constants: gradients flow
through them to nothing. The tape is rebuilt for every training step because
the network topology depends on which attributes are being edited.

Shapes are strict. Elementwise binary primitives require identical shapes;
the only broadcasting is :func:`expand` (and :func:`broadcast_add`, which is
built on it), so shape bugs surface where they are made.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class DomainError(ValueError):
    """Raised when an input lies outside a primitive's domain."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def leaf(self, value, name: str = "leaf") -> "Tensor":
        data = np.array(value, dtype=np.float64)
        node_id = len(self.nodes)
        self.nodes.append(Node(name, (), data.shape, lambda g: ()))
        return Tensor(data, self, node_id)

    def _record(self, kind, inputs, value, vjp) -> "Tensor":
        node_id = len(self.nodes)
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(Node(kind, ids, value.shape, vjp))
        return Tensor(value, self, node_id)

    def backward(self, output: "Tensor") -> dict[int, np.ndarray]:
        """Gradients of a scalar ``output`` w.r.t. every node on the tape.

        Nodes the output does not depend on get zero arrays.
        """
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        if output.shape != ():
            raise ShapeError(f"backward: output must be a scalar, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.node: np.ones((), dtype=np.float64)}
        for node_id in range(output.node, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self.nodes[node_id]
            if not node.inputs:
                continue
            for in_id, in_grad in zip(node.inputs, node.vjp(g)):
                if in_id is None or in_grad is None:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + in_grad
                else:
                    grads[in_id] = in_grad
        for node_id, node in enumerate(self.nodes):
            if node_id not in grads:
                grads[node_id] = np.zeros(node.shape, dtype=np.float64)
        return grads


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __radd__(self, other):
        return add(_lift(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, item):
        raise TypeError("use slice_/take for indexing so the tape sees it")


def _lift(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs belong to different tapes")
            tape = t.tape
    return tape


# active branch logs; see branch_log()
_BRANCH_LOGS: list[list[bytes]] = []


@contextmanager
def branch_log() -> Iterator[list[bytes]]:
    """Collect the branch taken by every piecewise primitive evaluated inside.

    Each relu, abs, maximum and clip call appends a byte string describing
    which side of its breakpoint every element fell on. Two evaluations with
    equal logs ran through the same smooth piece.
    """
    log: list[bytes] = []
    _BRANCH_LOGS.append(log)
    try:
        yield log
    finally:
        _BRANCH_LOGS.remove(log)


def note_branch(kind: str, side: np.ndarray) -> None:
    """Record a data-dependent branch decision in every open :func:`branch_log`."""
    for log in _BRANCH_LOGS:
        log.append(kind.encode() + np.ascontiguousarray(side, dtype=np.int8).tobytes())


def _emit(kind, inputs, value, vjp) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(kind, inputs, value, vjp)


def _same_shape(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: zero divisor")
    av, bv = a.data, b.data
    out = av / bv
    return _emit("div", (a, b), out, lambda g: (g / bv, -g * out / bv))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    note_branch("relu", mask)
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    if np.any(a.data > 700.0):
        raise DomainError("exp: argument above 700 overflows float64")
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0.0):
        raise DomainError("log: non-positive argument")
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    note_branch("abs", sign)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise ``max(a, c)`` against a scalar; ties route no gradient."""
    mask = a.data > c
    note_branch("maximum", np.sign(a.data - c))
    return _emit("maximum", (a,), np.where(mask, a.data, c), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    note_branch("clip", np.sign(a.data - lo) + np.sign(a.data - hi))
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * mask,))


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("where", a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"where: mask shape {mask.shape} vs {a.shape}")
    return _emit(
        "where",
        (a, b),
        np.where(mask, a.data, b.data),
        lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked operands must share identical batch dims.

    Supports (n,k)@(k,m), (k,)@(k,m), (n,k)@(k,), and (...,n,k)@(...,k,m)
    with equal leading shapes.
    """
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if av.ndim <= 2 and bv.ndim <= 2:
        if av.shape[-1] != bv.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    else:
        if av.ndim != bv.ndim or av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-2]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = av @ bv

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _emit("matmul", (a, b), out, vjp)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis (row-wise for stacked inputs)."""
    _same_shape("dot", a, b)
    av, bv = a.data, b.data
    out = np.sum(av * bv, axis=-1)
    return _emit(
        "dot", (a, b), out, lambda g: (g[..., None] * bv, g[..., None] * av)
    )


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis."""
    x = a.data
    out = np.sqrt(np.sum(x * x, axis=-1))
    # zero vectors take the zero subgradient
    safe = np.where(out > 0.0, out, 1.0)
    return _emit("l2norm", (a,), out, lambda g: (g[..., None] * x / safe[..., None],))


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _emit("sum", (a,), np.sum(a.data), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return _emit(
        "sum",
        (a,),
        np.sum(a.data, axis=ax),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, max-shifted.

    ``mask`` (boolean, same shape) excludes entries: they get weight exactly
    zero. A row with every entry masked returns all zeros.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} vs {x.shape}")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = np.sum(e, axis=-1, keepdims=True)
    out = e / np.where(z > 0.0, z, 1.0)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, vjp)


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis with max shifting."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    w = e / s
    return _emit("logsumexp", (a,), out, lambda g: (g[..., None] * w,))


# ---------------------------------------------------------------- structure


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)

    def vjp(g):
        g = np.sum(g, axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = np.sum(g, axis=axes, keepdims=True)
        return (g,)

    return _emit("expand", (a,), out, vjp)


def broadcast_add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` where ``b`` broadcasts to ``a``'s shape."""
    return add(a, expand(b, a.shape))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: {src} to {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        "transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),)
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1 :] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(sizes))
        )

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=ax), vjp)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {ax} of {a.shape}")
    src = a.shape
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return _emit("slice", (a,), a.data[idx], vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; indices must be unique."""
    indices = np.asarray(indices, dtype=np.int64)
    if np.unique(indices).size != indices.size:
        raise ValueError("take: repeated indices")
    ax = axis % a.ndim
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        idx = [slice(None)] * len(src)
        idx[ax] = indices
        full[tuple(idx)] = g
        return (full,)

    return _emit("take", (a,), np.take(a.data, indices, axis=ax), vjp)


def scatter(a: Tensor, indices, axis: int, size: int) -> Tensor:
    """Place slices of ``a`` at ``indices`` of a zero tensor with ``size`` along ``axis``."""
    indices = np.asarray(indices, dtype=np.int64)
    if np.unique(indices).size != indices.size:
        raise ValueError("scatter: repeated indices")
    ax = axis % a.ndim
    shape = list(a.shape)
    shape[ax] = size
    out = np.zeros(shape)
    idx = [slice(None)] * a.ndim
    idx[ax] = indices
    idx = tuple(idx)
    out[idx] = a.data
    return _emit("scatter", (a,), out, lambda g: (g[idx],))


# ---------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "abs": abs_,
    "maximum": maximum,
    "clip": clip,
    "where": where,
    "matmul": matmul,
    "dot": dot,
    "l2norm": l2norm,
    "sum": sum_,
    "mean": mean,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "expand": expand,
    "broadcast_add": broadcast_add,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "stack": stack,
    "slice": slice_,
    "take": take,
    "scatter": scatter,
}


def eval_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``kind`` by name; sequence-input primitives get the list."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind in ("concat", "stack"):
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def grad(fn: Callable[[Tensor], Tensor], x) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function of one array."""
    tape = Tape()
    leaf = tape.leaf(x)
    out = fn(leaf)
    grads = tape.backward(out)
    return out.item(), grads[leaf.node]
