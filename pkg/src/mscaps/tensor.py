"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

Every node gets a monotonically increasing id at construction, so the id order
is the order in which the forward pass recorded it. ``backward`` replays the
reachable part of that tape in reverse.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_tape_counter = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TensorError(ValueError):
    """Shape or usage error raised by a tensor op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Invalid use of the recorded graph (non-scalar loss, reuse, cycles)."""


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A float64 array plus the provenance needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = data.astype(np.float64, copy=False) if isinstance(data, np.ndarray) else _as_array(data)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._id = next(_tape_counter)
        self._consumed = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Iterable["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Record the result of an op. ``backward`` maps the output gradient to one gradient per parent."""
        _check_finite(data, op)
        parents = tuple(parents)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._id = next(_tape_counter)
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reachable differentiable nodes, newest first (tape replayed backwards)."""
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    nodes: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            nodes.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in recorded graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if not parent.requires_grad:
                continue
            pmark = state.get(id(parent))
            if pmark == 1:
                raise GraphError("cycle detected in recorded graph")
            if pmark is None:
                stack.append((parent, False))
    nodes.sort(key=lambda n: n._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Returns a map from each reachable leaf to its gradient. Calling this twice
    on the same loss raises; rebuild the forward pass instead.
    """
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward() already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad=True")
    loss._consumed = True

    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in order:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            leaves[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return leaves


# ----------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scalar_mul(a: Tensor, k: float) -> Tensor:
    return Tensor.from_op(a.data * k, (a,), lambda g: (g * k,), "scalar_mul")


def add_scalar(a: Tensor, k: float) -> Tensor:
    return Tensor.from_op(a.data + k, (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def channel_broadcast_mul(features: Tensor, weights: Tensor) -> Tensor:
    """Scale each channel of ``features[..., h, w, c]`` by ``weights[..., 1, 1, c]``."""
    f, m = features, weights
    if f.ndim < 3 or m.shape[:-3] != f.shape[:-3] or m.shape[-3:] != (1, 1, f.shape[-1]):
        raise TensorError(f"channel_broadcast_mul: cannot scale {f.shape} by {m.shape}")

    def bw(g):
        return g * m.data, (g * f.data).sum(axis=(-3, -2), keepdims=True)

    return Tensor.from_op(f.data * m.data, (f, m), bw, "channel_broadcast_mul")


# ----------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scalar_mul(sum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return Tensor.from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),), "transpose")


# ----------------------------------------------------------------------------
# contraction


def _parse_einsum(spec: str) -> tuple[str, str, str]:
    try:
        lhs, out = spec.replace(" ", "").split("->")
        x, y = lhs.split(",")
    except ValueError:
        raise TensorError(f"einsum: need explicit two-operand form 'ab,bc->ac', got {spec!r}") from None
    for name, s in (("first", x), ("second", y), ("output", out)):
        if len(set(s)) != len(s):
            raise TensorError(f"einsum: repeated index in {name} operand of {spec!r}")
    for s, other in ((x, y), (y, x)):
        lost = set(s) - set(other) - set(out)
        if lost:
            raise TensorError(f"einsum: index {sorted(lost)} summed inside a single operand in {spec!r}")
    return x, y, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum. Each index of an operand must also occur in the other operand or the output."""
    x, y, out = _parse_einsum(spec)
    a, b = as_tensor(a), as_tensor(b)
    data = np.einsum(spec, a.data, b.data, optimize=True)

    def bw(g):
        ga = np.einsum(f"{out},{y}->{x}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{x}->{y}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(np.ascontiguousarray(data, dtype=np.float64), (a, b), bw, f"einsum[{spec}]")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), bw, "softmax")


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
