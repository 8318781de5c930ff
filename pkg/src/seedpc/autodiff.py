"""Minimal reverse-mode autodiff over numpy arrays.

A Tape records operations on TracedValue nodes; ``Tape.backward`` on a
scalar output replays adjoints in reverse and fills ``.grad`` on every
traced input (exactly zero for inputs off the path).  Gradients accumulate
additively at fan-out.  One backward pass per tape; a second raises
UseAfterBackward.

Subgradient conventions: d|x|/dx = 0 at x = 0, and d(sqrt x)/dx = 0 at
x = 0, so set-distance losses stay finite when points coincide.  Integer
index arguments (gather) are constants: gradients flow through the gathered
values, never through the selection.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgument, UseAfterBackward

__all__ = [
    "Tape",
    "TracedValue",
    "add", "mul", "div", "sqrt", "absolute", "tanh", "relu",
    "vsum", "matmul", "gather", "broadcast_to", "reshape", "sinusoidal_embedding",
]


class Tape:
    """Operation recorder; one backward sweep allowed."""

    def __init__(self):
        self._records: list[tuple[TracedValue, list]] = []
        self._inputs: list[TracedValue] = []
        self._spent = False

    def input(self, value) -> "TracedValue":
        """A differentiable leaf; its .grad is set by backward()."""
        tv = TracedValue(self, np.asarray(value, dtype=np.float64), needs_grad=True)
        self._inputs.append(tv)
        return tv

    def constant(self, value) -> "TracedValue":
        return TracedValue(self, np.asarray(value, dtype=np.float64), needs_grad=False)

    def _record(self, out, pulls):
        if pulls:
            self._records.append((out, pulls))

    def backward(self, out: "TracedValue") -> None:
        if self._spent:
            raise UseAfterBackward("tape already consumed by a backward pass")
        if not isinstance(out, TracedValue) or out.tape is not self:
            raise InvalidArgument("backward target must be a value traced on this tape")
        if out.value.size != 1:
            raise InvalidArgument(f"backward needs a scalar, got shape {out.value.shape}")
        self._spent = True
        out.grad = np.ones_like(out.value)
        for node, pulls in reversed(self._records):
            if node.grad is None:
                continue
            for parent, vjp in pulls:
                g = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
                else:
                    parent.grad = parent.grad + g
        for tv in self._inputs:
            if tv.grad is None:
                tv.grad = np.zeros_like(tv.value)


class TracedValue:
    """An array value recorded on a tape."""

    __slots__ = ("tape", "value", "grad", "needs_grad")

    # Make numpy defer mixed ndarray/TracedValue operators to our dunders
    # instead of coercing to object arrays.
    __array_ufunc__ = None

    def __init__(self, tape: Tape, value: np.ndarray, needs_grad: bool):
        self.tape = tape
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, TracedValue) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(tape: Tape, x) -> TracedValue:
    if isinstance(x, TracedValue):
        if x.tape is not tape:
            raise InvalidArgument("operands come from different tapes")
        return x
    return tape.constant(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, TracedValue):
            return a.tape
    raise InvalidArgument("at least one operand must be traced")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an upstream gradient back down to a broadcast operand's shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b) -> TracedValue:
    tape = _tape_of(a, b)
    a = _lift(tape, a)
    b = _lift(tape, b)
    out = TracedValue(tape, fwd(a.value, b.value), a.needs_grad or b.needs_grad)
    pulls = []
    if a.needs_grad:
        pulls.append((a, lambda g, va=a.value, vb=b.value: _unbroadcast(vjp_a(g, va, vb), va.shape)))
    if b.needs_grad:
        pulls.append((b, lambda g, va=a.value, vb=b.value: _unbroadcast(vjp_b(g, va, vb), vb.shape)))
    tape._record(out, pulls)
    return out


def add(a, b) -> TracedValue:
    return _binary(a, b, np.add, lambda g, va, vb: g, lambda g, va, vb: g)


def mul(a, b) -> TracedValue:
    return _binary(a, b, np.multiply, lambda g, va, vb: g * vb, lambda g, va, vb: g * va)


def div(a, b) -> TracedValue:
    return _binary(
        a, b, np.divide,
        lambda g, va, vb: g / vb,
        lambda g, va, vb: -g * va / (vb * vb),
    )


def _unary(x, fwd, vjp) -> TracedValue:
    tape = _tape_of(x)
    out = TracedValue(tape, fwd(x.value), x.needs_grad)
    if x.needs_grad:
        tape._record(out, [(x, lambda g, vx=x.value, vo=out.value: vjp(g, vx, vo))])
    return out


def sqrt(x) -> TracedValue:
    # Derivative taken as 0 at x == 0 (subgradient of the min-distance use).
    def vjp(g, vx, vo):
        safe = np.where(vx > 0.0, vo, 1.0)
        return np.where(vx > 0.0, g * 0.5 / safe, 0.0)

    return _unary(x, np.sqrt, vjp)


def absolute(x) -> TracedValue:
    return _unary(x, np.abs, lambda g, vx, vo: g * np.sign(vx))


def tanh(x) -> TracedValue:
    return _unary(x, np.tanh, lambda g, vx, vo: g * (1.0 - vo * vo))


def relu(x) -> TracedValue:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, vx, vo: g * (vx > 0.0))


def vsum(x, axis=None, keepdims: bool = False) -> TracedValue:
    """Sum reduction; grad broadcasts the upstream value back over x."""
    tape = _tape_of(x)
    out = TracedValue(tape, np.sum(x.value, axis=axis, keepdims=keepdims), x.needs_grad)

    def vjp(g, vx=x.value):
        if axis is None:
            return np.broadcast_to(g, vx.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, vx.shape).copy()

    if x.needs_grad:
        tape._record(out, [(x, vjp)])
    return out


def matmul(a, b) -> TracedValue:
    tape = _tape_of(a, b)
    a = _lift(tape, a)
    b = _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise InvalidArgument("matmul is defined for 2-D operands")
    out = TracedValue(tape, a.value @ b.value, a.needs_grad or b.needs_grad)
    pulls = []
    if a.needs_grad:
        pulls.append((a, lambda g, vb=b.value: g @ vb.T))
    if b.needs_grad:
        pulls.append((b, lambda g, va=a.value: va.T @ g))
    tape._record(out, pulls)
    return out


def gather(x, indices) -> TracedValue:
    """Row gather x[indices]; the index array is a constant of the trace."""
    tape = _tape_of(x)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidArgument("gather indices must be integers")
    out = TracedValue(tape, x.value[idx], x.needs_grad)

    def vjp(g, vx=x.value, vi=idx):
        acc = np.zeros_like(vx)
        np.add.at(acc, vi, g)
        return acc

    if x.needs_grad:
        tape._record(out, [(x, vjp)])
    return out


def broadcast_to(x, shape) -> TracedValue:
    tape = _tape_of(x)
    out = TracedValue(tape, np.broadcast_to(x.value, shape).copy(), x.needs_grad)
    if x.needs_grad:
        tape._record(out, [(x, lambda g, vx=x.value: _unbroadcast(g, vx.shape))])
    return out


def reshape(x, shape) -> TracedValue:
    tape = _tape_of(x)
    out = TracedValue(tape, x.value.reshape(shape), x.needs_grad)
    if x.needs_grad:
        tape._record(out, [(x, lambda g, vx=x.value: np.asarray(g).reshape(vx.shape))])
    return out


def sinusoidal_embedding(t: float, dim: int) -> np.ndarray:
    """Classic sin/cos position embedding of a scalar step index (a constant).

    Frequencies are log-spaced over [1, 1/10000]; even slots take sin, odd
    slots cos.  dim must be even.
    """
    if dim < 2 or dim % 2 != 0:
        raise InvalidArgument(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    emb = np.empty(dim, dtype=np.float64)
    emb[0::2] = np.sin(ang)
    emb[1::2] = np.cos(ang)
    return emb
