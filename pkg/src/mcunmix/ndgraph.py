"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the handful of operations needed by the unrolled unmixing networks
are provided: matrix products, same-padded 1D/2D cross-correlations,
axis mixing, a few pointwise nonlinearities and reductions.

Every operation returns a :class:`Value`.  Calling :meth:`Value.backward`
on a scalar result fills ``grad`` on every leaf created with
``requires_grad=True``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "GraphError",
    "Value",
    "const",
    "param",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "mix",
    "conv1d",
    "conv2d",
    "corr1d",
    "corr2d",
    "relu",
    "sigmoid",
    "softmax",
    "soft_threshold",
    "shift_relu",
    "reshape",
    "transpose",
    "total",
    "sum_squares",
    "inner",
]

DTYPE = np.float64


class GraphError(ValueError):
    """Shape, contract or configuration error raised by graph operations."""


class Value:
    """A node in the computation graph.

    Parameters
    ----------
    data : array_like
        Value held by the node, stored as a float64 array.
    requires_grad : bool
        Whether gradients should flow into this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Value", ...] = (),
                 backward: Callable[[np.ndarray], None] | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward = backward
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        return f"Value(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Back-propagate from this scalar node to all leaves."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._spent:
            raise GraphError("backward() already ran on this graph; rebuild it before calling again")
        order = _topological(self)
        for node in order:
            if not node.is_leaf:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not node.is_leaf:
                # interior gradients are not needed after propagation
                node.grad = None
        self.grad = np.ones_like(self.data)
        self._spent = True

    # arithmetic sugar used by the network code
    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __radd__(self, other):
        return add(_lift(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Value) and other.data.size == 1 and self.data.size != 1:
            return scale(self, other)
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, shape) -> Value:
    if isinstance(x, Value):
        return x
    arr = np.asarray(x, dtype=DTYPE)
    if arr.shape != tuple(shape):
        arr = np.broadcast_to(arr, shape).copy()
    return Value(arr)


def _topological(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def const(data) -> Value:
    return Value(data, requires_grad=False)


def param(data) -> Value:
    return Value(data, requires_grad=True)


def _node(data, op: str, parents: Sequence[Value], backward) -> Value:
    needs = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=needs, op=op, parents=tuple(parents),
                 backward=backward if needs else None)


def _same_shape(a: Value, b: Value, op: str) -> None:
    if a.shape != b.shape:
        raise GraphError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Value, b: Value) -> Value:
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a: Value, b: Value) -> Value:
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a: Value, b: Value) -> Value:
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(a.data * b.data, "mul", (a, b), bw)


def neg(a: Value) -> Value:
    return _node(-a.data, "neg", (a,), lambda g: a._accumulate(-g))


def scale(x: Value, s: Value | float) -> Value:
    """Multiply an array by a scalar (a graph scalar or a plain float)."""
    if not isinstance(s, Value):
        c = float(s)
        return _node(c * x.data, "scale", (x,), lambda g: x._accumulate(c * g))
    if s.data.size != 1:
        raise GraphError(f"scale: factor must be scalar, got shape {s.shape}")
    sv = float(s.data.reshape(()))

    def bw(g):
        if x.requires_grad:
            x._accumulate(sv * g)
        if s.requires_grad:
            s._accumulate(np.reshape(np.vdot(x.data, g), s.shape))

    return _node(sv * x.data, "scale", (x, s), bw)


# ---------------------------------------------------------------------------
# linear maps

def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), bw)


def mix(m: Value, x: Value, axis: int) -> Value:
    """Apply the square matrix ``m`` along one axis of ``x``.

    ``out[..., i, ...] = sum_j m[i, j] * x[..., j, ...]``
    """
    axis = axis % x.data.ndim
    n = x.shape[axis]
    if m.shape != (n, n):
        raise GraphError(f"mix: matrix shape {m.shape} does not match axis {axis} of {x.shape}")
    xm = np.moveaxis(x.data, axis, 0)
    flat = xm.reshape(n, -1)
    out = np.moveaxis((m.data @ flat).reshape(xm.shape), 0, axis)

    def bw(g):
        gm = np.moveaxis(g, axis, 0).reshape(n, -1)
        if x.requires_grad:
            x._accumulate(np.moveaxis((m.data.T @ gm).reshape(xm.shape), 0, axis))
        if m.requires_grad:
            m._accumulate(gm @ flat.T)

    return _node(out, "mix", (m, x), bw)


def _check_odd(k: int, op: str) -> None:
    if k % 2 == 0:
        raise GraphError(f"{op}: kernel size must be odd, got {k}")


def _cols1d(x: np.ndarray, k: int) -> np.ndarray:
    # (C, R, P) -> (C*k, R*P)
    c = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (c, c)))
    win = sliding_window_view(xp, k, axis=2)  # (C, R, P, k)
    return win.transpose(0, 3, 1, 2).reshape(x.shape[0] * k, -1)


def _cols2d(x: np.ndarray, k: int) -> np.ndarray:
    # (C, H, W) -> (C*k*k, H*W)
    c = k // 2
    xp = np.pad(x, ((0, 0), (c, c), (c, c)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return win.transpose(0, 3, 4, 1, 2).reshape(x.shape[0] * k * k, -1)


def corr1d(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation along the last axis.

    ``x`` is ``(C_in, R, P)``, ``kernels`` is ``(C_out, C_in, k)``.
    """
    c_out, c_in, k = kernels.shape
    cols = _cols1d(x, k)
    return (kernels.reshape(c_out, c_in * k) @ cols).reshape(c_out, *x.shape[1:])


def corr2d(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Same-padded 2D cross-correlation; ``x`` is ``(C_in, H, W)``."""
    c_out, c_in, k, _ = kernels.shape
    cols = _cols2d(x, k)
    return (kernels.reshape(c_out, -1) @ cols).reshape(c_out, *x.shape[1:])


def conv1d(x: Value, kernels: Value) -> Value:
    """Spectral convolution, ``(C_in, R, P) * (C_out, C_in, k) -> (C_out, R, P)``.

    Each row of the ``R`` axis is filtered independently.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 3 or kernels.shape[1] != x.shape[0]:
        raise GraphError(f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    c_out, c_in, k = kernels.shape
    _check_odd(k, "conv1d")
    cols = _cols1d(x.data, k)
    out = (kernels.data.reshape(c_out, -1) @ cols).reshape(c_out, *x.shape[1:])

    def bw(g):
        g2 = g.reshape(c_out, -1)
        if kernels.requires_grad:
            kernels._accumulate((g2 @ cols.T).reshape(kernels.shape))
        if x.requires_grad:
            flipped = kernels.data[:, :, ::-1].transpose(1, 0, 2)
            x._accumulate(corr1d(g, np.ascontiguousarray(flipped)))

    return _node(out, "conv1d", (x, kernels), bw)


def conv2d(x: Value, kernels: Value) -> Value:
    """Spatial convolution, ``(C_in, H, W) * (C_out, C_in, k, k) -> (C_out, H, W)``."""
    if (x.data.ndim != 3 or kernels.data.ndim != 4 or kernels.shape[1] != x.shape[0]
            or kernels.shape[2] != kernels.shape[3]):
        raise GraphError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    _check_odd(k, "conv2d")
    cols = _cols2d(x.data, k)
    out = (kernels.data.reshape(c_out, -1) @ cols).reshape(c_out, *x.shape[1:])

    def bw(g):
        g2 = g.reshape(c_out, -1)
        if kernels.requires_grad:
            kernels._accumulate((g2 @ cols.T).reshape(kernels.shape))
        if x.requires_grad:
            flipped = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            x._accumulate(corr2d(g, np.ascontiguousarray(flipped)))

    return _node(out, "conv2d", (x, kernels), bw)


# ---------------------------------------------------------------------------
# pointwise nonlinearities

def relu(x: Value) -> Value:
    # NaN passes through so divergence stays visible downstream
    mask = (x.data > 0) | np.isnan(x.data)
    return _node(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: x._accumulate(g * mask))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Value) -> Value:
    s = _sigmoid(x.data)
    return _node(s, "sigmoid", (x,), lambda g: x._accumulate(g * s * (1.0 - s)))


def softmax(x: Value, axis: int = 0) -> Value:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, "softmax", (x,), bw)


def _threshold_arg(z) -> Value:
    if isinstance(z, Value):
        if z.data.size != 1:
            raise GraphError(f"threshold must be scalar, got shape {z.shape}")
        return z
    return const(float(z))


def soft_threshold(x: Value, z: Value | float) -> Value:
    """``sign(x) * max(|x| - z, 0)`` with a (possibly learnable) scalar ``z``."""
    z = _threshold_arg(z)
    zv = float(z.data.reshape(()))
    active = (np.abs(x.data) > zv) | np.isnan(x.data)
    sgn = np.sign(x.data)
    out = np.where(active, x.data - sgn * zv, 0.0)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * active)
        if z.requires_grad:
            z._accumulate(np.reshape(-np.sum(g * sgn * active), z.shape))

    return _node(out, "soft_threshold", (x, z), bw)


def shift_relu(x: Value, z: Value | float) -> Value:
    """``max(x - z, 0)``: nonnegative soft threshold."""
    z = _threshold_arg(z)
    zv = float(z.data.reshape(()))
    active = (x.data > zv) | np.isnan(x.data)
    out = np.where(active, x.data - zv, 0.0)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * active)
        if z.requires_grad:
            z._accumulate(np.reshape(-np.sum(g * active), z.shape))

    return _node(out, "shift_relu", (x, z), bw)


# ---------------------------------------------------------------------------
# shape manipulation and reductions

def reshape(x: Value, shape: Iterable[int]) -> Value:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise GraphError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _node(out, "reshape", (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x: Value) -> Value:
    if x.data.ndim != 2:
        raise GraphError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T.copy(), "transpose", (x,), lambda g: x._accumulate(g.T))


def total(x: Value) -> Value:
    return _node(np.asarray(x.data.sum()), "sum", (x,),
                 lambda g: x._accumulate(np.full(x.shape, float(g))))


def sum_squares(x: Value) -> Value:
    return _node(np.asarray(np.vdot(x.data, x.data)), "sum_squares", (x,),
                 lambda g: x._accumulate(2.0 * float(g) * x.data))


def inner(a: Value, b: Value) -> Value:
    _same_shape(a, b, "inner")

    def bw(g):
        if a.requires_grad:
            a._accumulate(float(g) * b.data)
        if b.requires_grad:
            b._accumulate(float(g) * a.data)

    return _node(np.asarray(np.vdot(a.data, b.data)), "inner", (a, b), bw)
