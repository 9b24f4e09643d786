"""Reverse-mode automatic differentiation over float64 numpy arrays.

Values are computed eagerly when a node is created (define-by-run). The
backward rule of every primitive is written in terms of other primitives, so
the gradients returned by :func:`gradient` are ordinary graph nodes and can be
differentiated again. That is what makes it possible to unroll an inner
optimiser and differentiate through it.

Shape rules
-----------
add, sub, mul, div
    numpy broadcasting; the backward pass sums gradients back to each
    operand's shape.
matmul
    ``(m, k) @ (k, n) -> (m, n)``; both operands must be 2-D.
sum, mean, logsumexp
    reduce over ``axis`` (None, int or tuple), optional ``keepdims``.
broadcast
    numpy ``broadcast_to`` semantics.
concat
    operands agree on every axis except ``axis``.
slice
    any numpy index (basic slices, integers, integer arrays).
"""

from __future__ import annotations

import builtins
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "DiffError",
    "ShapeError",
    "DomainError",
    "ContractError",
    "constant",
    "variable",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum",
    "mean",
    "broadcast",
    "reshape",
    "transpose",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "square",
    "logsumexp",
    "concat",
    "slice",
    "scatter",
    "sum_to",
    "gradient",
    "apply_primitive",
]


class DiffError(Exception):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(DiffError, ValueError):
    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " and ".join(str(s) for s in self.shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(DiffError, ValueError):
    def __init__(self, primitive: str, detail: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: {detail}")


class ContractError(DiffError, ValueError):
    pass


_uid = itertools.count()
builtin_slice = builtins.slice

VJP = Callable[["Node", "Node", Sequence[bool]], Sequence["Node | None"]]


class Node:
    """A value in the computation graph.

    ``uid`` increases monotonically with creation order; since a node can
    only depend on nodes created before it, :func:`gradient` uses it to prune
    the traversal.
    """

    __slots__ = ("value", "parents", "op", "vjp", "requires_grad", "uid", "meta")
    __array_priority__ = 1000.0

    def __init__(self, value, parents: tuple = (), op: str = "const",
                 vjp: VJP | None = None, requires_grad: bool = False, meta=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.uid = next(_uid)
        self.meta = meta

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Node(op={self.op}, shape={self.shape}{flag})"

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
        return slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def constant(value) -> Node:
    """Wrap a value as a node that never receives gradients."""
    if isinstance(value, Node):
        return value
    return Node(value)


def variable(value) -> Node:
    """Leaf node with ``requires_grad`` set (a copy of ``value``)."""
    v = value.value if isinstance(value, Node) else value
    return Node(np.array(v, dtype=np.float64), requires_grad=True, op="leaf")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents: tuple, op: str, vjp: VJP, meta=None) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, op, vjp, True, meta)
    return Node(value, op=op, meta=meta)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# structural primitives


def sum_to(g: Node, shape: tuple) -> Node:
    """Sum ``g`` down to ``shape`` (inverse of broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1)
    out = sum(g, axis=axes) if axes else g
    return reshape(out, shape) if out.shape != shape else out


def _broadcast_vjp(g, out, need):
    return (sum_to(g, out.parents[0].shape),)


def broadcast(a, shape) -> Node:
    a = _as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return _make(np.array(value), (a,), "broadcast", _broadcast_vjp)


def _reshape_vjp(g, out, need):
    return (reshape(g, out.parents[0].shape),)


def reshape(a, shape) -> Node:
    a = _as_node(a)
    shape = tuple(shape)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(value, (a,), "reshape", _reshape_vjp)


def _transpose_vjp(g, out, need):
    return (transpose(g),)


def transpose(a) -> Node:
    a = _as_node(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="operand must be 2-D")
    return _make(a.value.T, (a,), "transpose", _transpose_vjp)


def _sum_vjp(g, out, need):
    a = out.parents[0]
    axes, keepdims = out.meta
    if not keepdims:
        g = reshape(g, _keepdims_shape(a.shape, axes))
    return (broadcast(g, a.shape),)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = _as_node(a)
    axes = _norm_axes(axis, a.ndim)
    value = np.sum(a.value, axis=axes, keepdims=keepdims)
    return _make(value, (a,), "sum", _sum_vjp, meta=(axes, keepdims))


def _mean_vjp(g, out, need):
    a = out.parents[0]
    axes, keepdims = out.meta
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if not keepdims:
        g = reshape(g, _keepdims_shape(a.shape, axes))
    return (broadcast(g * (1.0 / count), a.shape),)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    axes = _norm_axes(axis, a.ndim)
    value = np.mean(a.value, axis=axes, keepdims=keepdims)
    return _make(value, (a,), "mean", _mean_vjp, meta=(axes, keepdims))


def _concat_vjp(g, out, need):
    axis = out.meta
    grads = []
    start = 0
    for p, needed in zip(out.parents, need):
        stop = start + p.shape[axis]
        if needed:
            index = (builtin_slice(None),) * axis + (builtin_slice(start, stop),)
            grads.append(slice(g, index))
        else:
            grads.append(None)
        start = stop
    return tuple(grads)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = tuple(_as_node(n) for n in nodes)
    if not nodes:
        raise ContractError("concat: needs at least one operand")
    axis = axis % nodes[0].ndim
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(n.shape for n in nodes)) from None
    return _make(value, nodes, "concat", _concat_vjp, meta=axis)


def _is_basic_index(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (int, np.integer, builtin_slice)) or i is None or i is Ellipsis
               for i in index)


def _slice_vjp(g, out, need):
    return (scatter(g, out.meta, out.parents[0].shape),)


def slice(a, index) -> Node:  # noqa: A001
    """``a[index]`` as a differentiable primitive."""
    a = _as_node(a)
    try:
        value = a.value[index]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None
    return _make(np.array(value), (a,), "slice", _slice_vjp, meta=index)


def _scatter_vjp(g, out, need):
    return (slice(g, out.meta[0]),)


def scatter(a, index, shape) -> Node:
    """Zeros of ``shape`` with ``a`` added at ``index`` (adjoint of slice)."""
    a = _as_node(a)
    value = np.zeros(shape)
    if _is_basic_index(index):
        value[index] = a.value
    else:
        np.add.at(value, index, a.value)
    return _make(value, (a,), "scatter", _scatter_vjp, meta=(index, tuple(shape)))


# --------------------------------------------------------------------------
# arithmetic


def _add_vjp(g, out, need):
    a, b = out.parents
    return (sum_to(g, a.shape) if need[0] else None,
            sum_to(g, b.shape) if need[1] else None)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)
    return _make(a.value + b.value, (a, b), "add", _add_vjp)


def _sub_vjp(g, out, need):
    a, b = out.parents
    return (sum_to(g, a.shape) if need[0] else None,
            sum_to(neg(g), b.shape) if need[1] else None)


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("sub", a, b)
    return _make(a.value - b.value, (a, b), "sub", _sub_vjp)


def _mul_vjp(g, out, need):
    a, b = out.parents
    return (sum_to(mul(g, b), a.shape) if need[0] else None,
            sum_to(mul(g, a), b.shape) if need[1] else None)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("mul", a, b)
    return _make(a.value * b.value, (a, b), "mul", _mul_vjp)


def _div_vjp(g, out, need):
    a, b = out.parents
    ga = sum_to(div(g, b), a.shape) if need[0] else None
    gb = sum_to(neg(div(mul(g, out), b)), b.shape) if need[1] else None
    return ga, gb


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0.0):
        raise DomainError("div", "division by zero")
    return _make(a.value / b.value, (a, b), "div", _div_vjp)


def _neg_vjp(g, out, need):
    return (neg(g),)


def neg(a) -> Node:
    a = _as_node(a)
    return _make(-a.value, (a,), "neg", _neg_vjp)


def _matmul_vjp(g, out, need):
    a, b = out.parents
    return (matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None)


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(a.value @ b.value, (a, b), "matmul", _matmul_vjp)


# --------------------------------------------------------------------------
# elementwise nonlinearities


def _exp_vjp(g, out, need):
    return (mul(g, out),)


def exp(a) -> Node:
    a = _as_node(a)
    return _make(np.exp(a.value), (a,), "exp", _exp_vjp)


def _log_vjp(g, out, need):
    return (div(g, out.parents[0]),)


def log(a) -> Node:
    a = _as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log", "argument must be strictly positive")
    return _make(np.log(a.value), (a,), "log", _log_vjp)


def _sqrt_vjp(g, out, need):
    return (div(mul(g, 0.5), out),)


def sqrt(a) -> Node:
    a = _as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError("sqrt", "argument must be strictly positive")
    return _make(np.sqrt(a.value), (a,), "sqrt", _sqrt_vjp)


def _tanh_vjp(g, out, need):
    return (mul(g, sub(1.0, square(out))),)


def tanh(a) -> Node:
    a = _as_node(a)
    return _make(np.tanh(a.value), (a,), "tanh", _tanh_vjp)


def _sigmoid_value(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_vjp(g, out, need):
    return (mul(g, mul(out, sub(1.0, out))),)


def sigmoid(a) -> Node:
    a = _as_node(a)
    return _make(_sigmoid_value(a.value), (a,), "sigmoid", _sigmoid_vjp)


def _softplus_vjp(g, out, need):
    return (mul(g, sigmoid(out.parents[0])),)


def softplus(a) -> Node:
    """``log(1 + exp(a))`` computed without overflow."""
    a = _as_node(a)
    return _make(np.logaddexp(0.0, a.value), (a,), "softplus", _softplus_vjp)


def log_sigmoid(a) -> Node:
    return neg(softplus(neg(a)))


def _square_vjp(g, out, need):
    return (mul(g, mul(out.parents[0], 2.0)),)


def square(a) -> Node:
    a = _as_node(a)
    return _make(np.square(a.value), (a,), "square", _square_vjp)


def _logsumexp_vjp(g, out, need):
    a = out.parents[0]
    axes, keepdims = out.meta
    kshape = _keepdims_shape(a.shape, axes)
    lse = out if keepdims else reshape(out, kshape)
    if not keepdims:
        g = reshape(g, kshape)
    return (mul(broadcast(g, a.shape), exp(sub(a, broadcast(lse, a.shape)))),)


def logsumexp(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    axes = _norm_axes(axis, a.ndim)
    m = np.max(a.value, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    value = np.log(np.sum(np.exp(a.value - m), axis=axes, keepdims=True)) + m
    if not keepdims:
        value = value.reshape(tuple(s for i, s in enumerate(a.shape) if i not in axes))
    return _make(value, (a,), "logsumexp", _logsumexp_vjp, meta=(axes, keepdims))


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "sum": sum, "mean": mean, "broadcast": broadcast, "exp": exp, "log": log,
    "tanh": tanh, "sigmoid": sigmoid, "square": square, "logsumexp": logsumexp,
    "concat": lambda *ops, **kw: concat(ops, **kw), "slice": slice,
    "reshape": reshape, "transpose": transpose, "softplus": softplus, "sqrt": sqrt,
}


def apply_primitive(kind: str, *operands, **kwargs) -> Node:
    """Dispatch a primitive by name, e.g. ``apply_primitive("add", a, b)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **kwargs)


# --------------------------------------------------------------------------
# reverse sweep


def _relevant_order(output: Node, targets: set, floor: int):
    """Post-order list of nodes lying on a path from a target to ``output``."""
    relevant: dict[int, bool] = {}
    order = []
    visiting = set()
    stack = [output]
    while stack:
        node = stack[-1]
        uid = node.uid
        if uid in relevant:
            stack.pop()
            continue
        if uid not in visiting:
            visiting.add(uid)
            for p in node.parents:
                if p.requires_grad and p.uid >= floor and p.uid not in relevant:
                    stack.append(p)
            continue
        stack.pop()
        rel = uid in targets or any(relevant.get(p.uid, False) for p in node.parents)
        relevant[uid] = rel
        if rel:
            order.append(node)
    return order, relevant


def gradient(output: Node, wrt: Iterable[Node]) -> list[Node]:
    """Gradients of a scalar ``output`` with respect to each node in ``wrt``.

    The result nodes stay attached to the graph, so calling ``gradient`` on
    (a scalar function of) them gives second derivatives. Nodes that do not
    influence ``output`` get a constant zero gradient of matching shape.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ContractError(f"gradient: output must be scalar, got shape {output.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise ContractError(f"gradient: wrt node {w!r} does not require grad")
    if not wrt:
        return []
    if not output.requires_grad:
        return [Node(np.zeros(w.shape)) for w in wrt]
    targets = {w.uid for w in wrt}
    floor = min(targets)
    order, relevant = _relevant_order(output, targets, floor)

    grads: dict[int, Node] = {output.uid: Node(np.ones(output.shape))}
    for node in reversed(order):
        g = grads.get(node.uid)
        if g is None or node.vjp is None:
            continue
        if node.uid not in targets:
            del grads[node.uid]
        need = tuple(relevant.get(p.uid, False) for p in node.parents)
        for p, pg in zip(node.parents, node.vjp(g, node, need)):
            if pg is None or not relevant.get(p.uid, False):
                continue
            prev = grads.get(p.uid)
            grads[p.uid] = pg if prev is None else add(prev, pg)
    return [grads.get(w.uid) or Node(np.zeros(w.shape)) for w in wrt]
