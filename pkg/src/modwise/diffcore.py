"""Minimal reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` is an append-only list of op records. Every op appends one
node whose inputs are earlier nodes, so the node order is already a
topological order and :func:`backward` simply walks it in reverse.

Graphs are cheap and meant to be rebuilt for every forward pass::

    g = Graph()
    w = g.leaf(np.array(3.0), requires_grad=True)
    y = mul(w, w)
    backward(y)
    w.grad  # array(6.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BCE_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A node value in a :class:`Graph`."""

    __slots__ = ("graph", "node_id", "data", "requires_grad", "grad")

    def __init__(self, graph: "Graph", node_id: int, data: np.ndarray, requires_grad: bool):
        self.graph = graph
        self.node_id = node_id
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node_id}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    out: Tensor
    # maps upstream gradient to one gradient per input (None when not needed)
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    root: int | None = None

    def leaf(self, value, requires_grad: bool = False, kind: str = "leaf") -> Tensor:
        data = np.array(value, dtype=np.float64)
        _check_finite(kind, data)
        t = Tensor(self, len(self.nodes), data, requires_grad)
        self.nodes.append(Node(kind, (), t))
        return t

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False, kind="const")

    def _record(self, kind, inputs, data, vjp) -> Tensor:
        _check_finite(kind, data)
        needs = any(t.requires_grad for t in inputs)
        t = Tensor(self, len(self.nodes), data, needs)
        self.nodes.append(Node(kind, tuple(i.node_id for i in inputs), t, vjp if needs else None))
        return t

    def leaves(self) -> list[Tensor]:
        return [n.out for n in self.nodes if not n.inputs and n.out.requires_grad]


def _check_finite(kind: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind}: non-finite values")


def _graph_of(items) -> Graph:
    for x in items:
        if isinstance(x, Tensor):
            return x.graph
    raise TypeError("at least one input must be a Tensor")


def _lift(g: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not g:
            raise ValueError("tensors belong to different graphs")
        return x
    return g.constant(x)


def _elementwise_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unscalar(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over leading axes introduced by matmul broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(grad.shape, shape)) if s == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _elementwise_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return g._record("add", (a, b), a.data + b.data,
                     lambda gr: (_unscalar(gr, sa), _unscalar(gr, sb)))


def sub(a, b) -> Tensor:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _elementwise_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return g._record("sub", (a, b), a.data - b.data,
                     lambda gr: (_unscalar(gr, sa), _unscalar(-gr, sb)))


def mul(a, b) -> Tensor:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _elementwise_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return g._record("mul", (a, b), ad * bd,
                     lambda gr: (_unscalar(gr * bd, ad.shape), _unscalar(gr * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's leading-axis broadcasting."""
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def vjp(gr):
        ga = _reduce_to(np.matmul(gr, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _reduce_to(np.matmul(np.swapaxes(ad, -1, -2), gr), bd.shape)
        return ga, gb

    return g._record("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    xd = x.data
    # subgradient at exactly 0 is 0
    return x.graph._record("relu", (x,), np.where(xd > 0, xd, 0.0),
                           lambda gr: (gr * (xd > 0),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return x.graph._record("tanh", (x,), y, lambda gr: (gr * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return x.graph._record("sigmoid", (x,), y, lambda gr: (gr * y * (1.0 - y),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return x.graph._record("clamp", (x,), np.clip(xd, lo, hi), lambda gr: (gr * inside,))


# ---------------------------------------------------------------------------
# reductions and losses


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(gr):
        if axis is not None and not keepdims:
            gr = np.expand_dims(gr, axis)
        return (np.broadcast_to(gr, shape).copy(),)

    return x.graph._record("sum", (x,), np.asarray(out), vjp)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(a, b) -> Tensor:
    """Mean squared difference over all elements."""
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size
    k = 2.0 / n
    return g._record("mse", (a, b), np.asarray(np.mean(diff * diff)),
                     lambda gr: (gr * k * diff, -gr * k * diff))


def l2norm(x: Tensor, axis: int | None = None) -> Tensor:
    """Euclidean norm; the gradient at the zero vector is taken as 0.

    Entries are scaled by the largest magnitude before squaring, so tiny or
    huge inputs neither underflow nor overflow.
    """
    xd = x.data
    m = np.max(np.abs(xd), axis=axis, keepdims=True) if xd.size else np.zeros((1,) * xd.ndim)
    m = np.where(m > 0, m, 1.0)
    n = m * np.sqrt(np.sum((xd / m) ** 2, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = n.reshape(()) if axis is None else np.squeeze(n, axis=axis)

    def vjp(gr):
        gr = np.asarray(gr)
        if axis is not None:
            gr = np.expand_dims(gr, axis)
        return (np.where(n > 0, gr * xd / safe, 0.0),)

    return x.graph._record("l2norm", (x,), out, vjp)


def bce(p, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against targets ``y``.

    ``p`` is clipped to ``[BCE_EPS, 1 - BCE_EPS]``; inside the clip the
    gradient is exact, outside it is zero.
    """
    g = _graph_of((p, y))
    p, y = _lift(g, p), _lift(g, y)
    if p.shape != y.shape:
        raise ShapeError(f"bce: incompatible shapes {p.shape} and {y.shape}")
    pd = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    yd = y.data
    inside = (p.data >= BCE_EPS) & (p.data <= 1.0 - BCE_EPS)
    n = pd.size
    val = -np.mean(yd * np.log(pd) + (1.0 - yd) * np.log1p(-pd))

    def vjp(gr):
        gp = gr * ((1.0 - yd) / (1.0 - pd) - yd / pd) / n * inside
        gy = gr * (np.log1p(-pd) - np.log(pd)) / n
        return gp, gy

    return g._record("bce", (p, y), np.asarray(val), vjp)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return x.graph._record("reshape", (x,), out, lambda gr: (gr.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got {x.shape}")
    return x.graph._record("transpose", (x,), np.swapaxes(x.data, -1, -2),
                           lambda gr: (np.swapaxes(gr, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return x.graph._record("permute", (x,), np.transpose(x.data, axes),
                           lambda gr: (np.transpose(gr, inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc
    return x.graph._record("broadcast_to", (x,), out, lambda gr: (_reduce_to(gr, src),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    g = _graph_of(xs)
    xs = [_lift(g, x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return g._record("concat", tuple(xs), out, lambda gr: tuple(np.split(gr, splits, axis=axis)))


def take(x: Tensor, index, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (no gradient to the index)."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"take: index must be 1-D, got shape {index.shape}")
    shape = x.shape
    out = np.take(x.data, index, axis=axis)

    def vjp(gr):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, axis, 0), index, np.moveaxis(gr, axis, 0))
        return (full,)

    return x.graph._record("take", (x,), out, vjp)


def take_along(x: Tensor, index, axis: int) -> Tensor:
    """``np.take_along_axis`` with gradient scattered back to the source."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape
    out = np.take_along_axis(x.data, index, axis=axis)

    def vjp(gr):
        full = np.zeros(shape)
        np.put_along_axis(full, index, gr, axis=axis)
        return (full,)

    return x.graph._record("take_along", (x,), out, vjp)


# ---------------------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul,
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "clamp": clamp,
    "sum": sum, "mean": mean, "mse": mse, "l2norm": l2norm, "bce": bce,
    "reshape": reshape, "transpose": transpose, "permute": permute, "broadcast_to": broadcast_to,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "take": take, "take_along": take_along,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply op ``kind`` by name; the op is recorded on the inputs' graph."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor of ``root``'s graph.

    Leaves with no path to ``root`` receive an all-zero gradient.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    g = root.graph
    g.root = root.node_id
    grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
    for node in reversed(g.nodes[: root.node_id + 1]):
        gr = grads.pop(node.out.node_id, None)
        if node.out.requires_grad and not node.inputs:
            node.out.grad = gr if gr is not None else np.zeros(node.out.shape)
            continue
        if gr is None or node.vjp is None:
            continue
        for i, gi in zip(node.inputs, node.vjp(gr)):
            if gi is None or not g.nodes[i].out.requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    for node in g.nodes[root.node_id + 1:]:
        if node.out.requires_grad and not node.inputs:
            node.out.grad = np.zeros(node.out.shape)


def grad(f: Callable[[Tensor], Tensor], point) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``f`` at ``point`` on a fresh graph."""
    g = Graph()
    x = g.leaf(point, requires_grad=True)
    y = f(x)
    backward(y)
    return y.item(), x.grad


@dataclass
class FDReport:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    message: str = ""


def finite_difference_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-4,
                            tol: float = 1e-4, coords: Sequence[int] | None = None) -> FDReport:
    """Compare the analytic gradient of ``f`` with central differences.

    ``coords`` restricts the comparison to a subset of flat coordinates,
    which keeps checks on large tensors affordable.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(point, dtype=np.float64)
    try:
        _, analytic = grad(f, p)
    except (NonFiniteError, FloatingPointError) as exc:
        return FDReport(False, float("inf"), np.array([]), np.array([]), f"analytic pass failed: {exc}")
    flat_a = analytic.reshape(-1)
    idx = np.arange(p.size) if coords is None else np.asarray(coords)
    numeric = np.empty(len(idx))
    for n, j in enumerate(idx):
        vals = []
        for sgn in (1.0, -1.0):
            q = p.copy().reshape(-1)
            q[j] += sgn * step
            try:
                vals.append(f(Graph().constant(q.reshape(p.shape))).item())
            except (NonFiniteError, FloatingPointError) as exc:
                return FDReport(False, float("inf"), flat_a[idx], numeric[:n],
                                f"f non-finite at coordinate {j}: {exc}")
        numeric[n] = (vals[0] - vals[1]) / (2.0 * step)
    a = flat_a[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    rel = np.abs(a - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    ok = worst <= tol
    msg = "" if ok else f"max relative error {worst:.3g} at coordinate {int(idx[int(rel.argmax())])}"
    return FDReport(ok, worst, a, numeric, msg)
