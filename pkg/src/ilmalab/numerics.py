"""Minimal reverse-mode differentiation over dense float64 numpy arrays.

Operations record themselves on the active :class:`Graph` (entered with a
``with`` block) whenever one of their inputs requires a gradient.  Outside a
graph every op is a plain numpy computation, which is what decoding and
evaluation use.

    >>> w = Tensor(np.eye(2), requires_grad=True)
    >>> with Graph() as g:
    ...     loss = total(matmul(w, w))
    ...     g.backward(loss)
    >>> w.grad
    array([[2., 2.],
           [2., 2.]])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every method maps to a primitive below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Graph"] = []


class Graph:
    """Append-only tape of primitive ops.

    Nodes are appended in execution order, so a node's inputs always precede
    it; :meth:`backward` walks the tape once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, kind, inputs, output, backward) -> None:
        self.nodes.append(Node(kind, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: float | np.ndarray = 1.0) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf tensor's ``grad``."""
        loss.grad = np.broadcast_to(np.asarray(seed, dtype=DTYPE), loss.shape).copy()
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is not None and inp.requires_grad:
                    inp.accumulate(gi)


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    result = Tensor(out)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        graph.record(kind, inputs, result, backward)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``; ``a`` may carry leading batch axes, ``b`` is 1-D or 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = (a.data.reshape(-1, a.shape[-1]) * g.reshape(-1, 1)).sum(axis=0)
            return ga, gb
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    # strict inequality: relu'(0) = 0
    mask = x.data > 0.0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


_UNARY = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid}


def elementwise(x, kind: str, other=None) -> Tensor:
    """Dispatch ``add``, ``tanh``, ``relu`` (and ``sigmoid``) by name."""
    if kind == "add":
        if other is None:
            raise ValueError("elementwise add needs a second operand")
        return add(x, other)
    try:
        return _UNARY[kind](x)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


def activation(kind: str) -> Callable[[Tensor], Tensor]:
    try:
        return _UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def log_softmax(z, axis: int = -1) -> Tensor:
    """``z - logsumexp(z)`` along ``axis`` with max subtraction."""
    z = as_tensor(z)
    if z.shape[axis] < 1:
        raise DimensionError("log_softmax over an empty axis")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("log_softmax: non-finite input")
    m = z.data.max(axis=axis, keepdims=True)
    shifted = z.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (z,), out, backward)


def gather_rows(w, ids) -> Tensor:
    """Rows of ``w`` selected by an integer index array (any shape)."""
    w = as_tensor(w)
    ids = np.asarray(ids, dtype=np.int64)
    if w.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got shape {w.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= w.shape[0]):
        raise IndexError(f"gather_rows: ids outside [0, {w.shape[0]})")
    out = w.data[ids]

    def backward(g):
        gw = np.zeros_like(w.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, w.shape[1]))
        return (gw,)

    return _emit("gather_rows", (w,), out, backward)


def take(x, index) -> Tensor:
    """Numpy-style indexing (basic or advanced); gradient scatters back."""
    x = as_tensor(x)
    out = x.data[index]
    if np.shares_memory(out, x.data):
        out = out.copy()

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit("take", (x,), out, backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]

    return _emit("stack", xs, out, backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _emit("concat", xs, out, backward)


def total(x, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _emit("sum", (x,), out, backward)


def custom(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    """Register a hand-written op whose backward returns one gradient per input."""
    return _emit(kind, [as_tensor(t) for t in inputs], np.asarray(out, dtype=DTYPE), backward)


def logsumexp(values: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(values, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(values - m), axis=axis, keepdims=True)) + m
    return out if axis is None and values.ndim == 0 else np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    n_samples: int = 20,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheck:
    """Compare graph gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    ``n_samples`` coordinates are drawn uniformly over all parameter entries.
    """
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    with Graph() as g:
        loss = fn()
        g.backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    names = list(params)
    sizes = np.array([params[k].data.size for k in names])
    picks = rng.choice(int(sizes.sum()), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, worst_at = 0.0, None
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        p = params[name]
        idx = np.unravel_index(int(flat - offsets[which]), p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + step
        up = fn().item()
        p.data[idx] = orig - step
        down = fn().item()
        p.data[idx] = orig
        numeric = (up - down) / (2.0 * step)
        err = relative_error(float(analytic[name][idx]), numeric, floor)
        if err >= worst:
            worst, worst_at = err, (name, tuple(int(i) for i in idx))
    return GradCheck(worst, len(picks), worst_at)
