"""Reverse-mode automatic differentiation on a flat tape.

Nodes hold float64 arrays (a scalar is a 0-d array). Each node records its
parents and a vector-Jacobian rule; ``Tape.backward`` walks the tape once in
reverse. Only the primitives needed by the training losses are provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@dataclass
class ParamVector:
    """Flat parameter storage with a list of block shapes.

    ``values`` is a 1-d float64 array; block ``k`` is a view of
    ``values[offset_k : offset_k + prod(shape_k)]`` reshaped to ``shape_k``.
    """

    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigurationError("ParamVector values must be flat")
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if total != self.values.size:
            raise ConfigurationError(
                f"layout describes {total} parameters but values has {self.values.size}"
            )

    @classmethod
    def zeros(cls, layout) -> "ParamVector":
        layout = [(name, tuple(shape)) for name, shape in layout]
        return cls(np.zeros(sum(int(np.prod(s)) for _, s in layout)), layout)

    def offsets(self) -> list[int]:
        out, pos = [], 0
        for _, shape in self.layout:
            out.append(pos)
            pos += int(np.prod(shape))
        return out

    def blocks(self) -> list[np.ndarray]:
        return [
            self.values[o : o + int(np.prod(shape))].reshape(shape)
            for o, (_, shape) in zip(self.offsets(), self.layout)
        ]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.layout))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), list(self.layout))

    def __len__(self):
        return self.values.size


VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100.0

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def _wrap(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


class Tape:
    """Append-only record of a computation.

    Parents always precede children, so a single reverse sweep is a valid
    topological order for accumulation.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[VJP | None] = []
        # False for constants and anything computed only from constants
        self.live: list[bool] = []
        self.adjoints: list[np.ndarray | None] | None = None

    def __len__(self):
        return len(self.values)

    def push(self, kind: str, value, parents: tuple[Var, ...] = (), vjp: VJP | None = None) -> Var:
        for p in parents:
            if p.tape is not self:
                raise UsageError("cannot mix nodes from different tapes")
        live = kind in ("leaf", "param") or any(self.live[p.index] for p in parents)
        self.kinds.append(kind)
        self.values.append(np.asarray(value, dtype=np.float64))
        self.parents.append(tuple(p.index for p in parents))
        self.vjps.append(vjp if live else None)
        self.live.append(live)
        return Var(self, len(self.values) - 1)

    def constant(self, value) -> Var:
        return self.push("const", value)

    def leaf(self, value) -> Var:
        return self.push("leaf", value)

    def params(self, pv: ParamVector) -> list[Var]:
        """One leaf per block of ``pv`` (copies, so later updates never alias the tape)."""
        return [self.push("param", block.copy()) for block in pv.blocks()]

    def backward(self, out: Var, seed: float | np.ndarray = 1.0) -> list[np.ndarray | None]:
        if len(self.values) == 0:
            raise UsageError("backward on an empty tape")
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[out.index] = np.broadcast_to(
            np.asarray(seed, dtype=np.float64), self.values[out.index].shape
        ).copy()
        for i in range(out.index, -1, -1):
            g = adj[i]
            if g is None or self.vjps[i] is None:
                continue
            for p, gp in zip(self.parents[i], self.vjps[i](g)):
                if gp is None or not self.live[p]:
                    continue
                # adjoints are never written in place, so views can be stored as is
                adj[p] = gp if adj[p] is None else adj[p] + gp
        self.adjoints = adj
        return adj

    def grad(self, v: Var) -> np.ndarray:
        if self.adjoints is None:
            raise UsageError("backward has not been run")
        g = self.adjoints[v.index]
        return np.zeros_like(self.values[v.index]) if g is None else np.array(g)

    def grad_params(self, handles: Sequence[Var], like: ParamVector) -> ParamVector:
        """Concatenate block adjoints into a gradient shaped like ``like``."""
        flat = np.concatenate([self.grad(h).ravel() for h in handles]) if handles else np.zeros(0)
        return ParamVector(flat, list(like.layout))


# ---- primitives -----------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return a.tape.push(
        "add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return a.tape.push(
        "sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a: Var, b: Var) -> Var:
    va, vb = a.value, b.value
    la, lb = a.tape.live[a.index], b.tape.live[b.index]
    return a.tape.push(
        "mul",
        va * vb,
        (a, b),
        lambda g: (
            _unbroadcast(g * vb, va.shape) if la else None,
            _unbroadcast(g * va, vb.shape) if lb else None,
        ),
    )


def scale(a: Var, c: float) -> Var:
    return a.tape.push("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    va, vb = a.value, b.value
    la, lb = a.tape.live[a.index], b.tape.live[b.index]
    return a.tape.push(
        "matmul", va @ vb, (a, b), lambda g: (g @ vb.T if la else None, va.T @ g if lb else None)
    )


def transpose(a: Var) -> Var:
    return a.tape.push("transpose", a.value.T, (a,), lambda g: (g.T,))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape.push("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(a: Var, slope: float = 0.2) -> Var:
    # slope at 0 is the positive-side slope
    mask = np.where(a.value >= 0.0, 1.0, slope)
    return a.tape.push("leaky_relu", a.value * mask, (a,), lambda g: (g * mask,))


def leaky_relu_slope(a: Var, slope: float = 0.2) -> Var:
    """Derivative of leaky-ReLU at ``a``; piecewise constant, so recorded as a constant."""
    return a.tape.constant(np.where(a.value >= 0.0, 1.0, slope))


def soft_clamp_values(x: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Values and slopes of the soft clamp (see ``soft_clamp``)."""
    if margin <= 0.0:
        return np.clip(x, 0.0, 1.0), ((x > 0.0) & (x < 1.0)).astype(np.float64)
    lo, hi = margin, 1.0 - margin
    y = x.copy()
    d = np.ones_like(x)
    below, above = x < lo, x > hi
    tb = np.tanh((x[below] - lo) / margin)
    ta = np.tanh((x[above] - hi) / margin)
    y[below] = lo + margin * tb
    y[above] = hi + margin * ta
    d[below] = 1.0 - tb * tb
    d[above] = 1.0 - ta * ta
    return y, d


def soft_clamp(a: Var, margin: float) -> Var:
    """Identity on [margin, 1 - margin] with scaled-tanh tails saturating at 0 and 1.

    Slope is 1 inside and below 1 in the tails; ``margin == 0`` is a hard clamp.
    """
    y, d = soft_clamp_values(a.value, margin)
    return a.tape.push("soft_clamp", y, (a,), lambda g: (g * d,))


def square(a: Var) -> Var:
    v = a.value
    return a.tape.push("square", v * v, (a,), lambda g: (2.0 * g * v,))


def absolute(a: Var) -> Var:
    s = np.sign(a.value)  # |x|' at 0 is 0
    return a.tape.push("abs", np.abs(a.value), (a,), lambda g: (g * s,))


def power(a: Var, p: float) -> Var:
    """``a ** p`` for a nonnegative base and ``p >= 1``."""
    v = a.value
    if np.any(v < 0):
        raise ConfigurationError("power expects a nonnegative base")
    d = p * v ** (p - 1.0) if p != 1.0 else np.ones_like(v)
    return a.tape.push("power", v**p, (a,), lambda g: (g * d,))


def total(a: Var) -> Var:
    shape = a.shape
    return a.tape.push("sum", a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Var) -> Var:
    shape, n = a.shape, a.value.size
    return a.tape.push("mean", a.value.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def sum_rows(a: Var) -> Var:
    """Sum over the last axis, keeping it: (m, k) -> (m, 1)."""
    shape = a.shape
    return a.tape.push(
        "sum_rows", a.value.sum(axis=-1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape),)
    )


def sqnorm_rows(a: Var) -> Var:
    """Squared Euclidean norm of each row: (m, k) -> (m, 1)."""
    v = a.value
    return a.tape.push(
        "sqnorm", (v * v).sum(axis=-1, keepdims=True), (a,), lambda g: (2.0 * g * v,)
    )


def norm_rows(a: Var) -> Var:
    """Euclidean norm of each row; the subgradient at a zero row is 0."""
    v = a.value
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    safe = np.where(n > 0.0, n, 1.0)
    unit = np.where(n > 0.0, v / safe, 0.0)
    return a.tape.push("norm", n, (a,), lambda g: (g * unit,))


def min_over(a: Var, axis: int = -1) -> Var:
    """Minimum along ``axis``; ties send the gradient to the first minimizer."""
    v = a.value
    idx = np.argmin(v, axis=axis)
    out = np.take_along_axis(v, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(v)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return a.tape.push("min", out, (a,), vjp)


# ---- gradient helpers -----------------------------------------------------


def value_and_grad(lossfn: Callable[[Tape, list[Var]], Var], params: ParamVector, seed: float = 1.0):
    """Run ``lossfn`` on a fresh tape and return (loss value, gradient ParamVector)."""
    tape = Tape()
    handles = tape.params(params)
    out = lossfn(tape, handles)
    tape.backward(out, seed)
    return float(out.value), tape.grad_params(handles, params)


def finite_difference_gradient(lossfn: Callable[[np.ndarray], float], params: ParamVector, step: float = 1e-4) -> ParamVector:
    """Central-difference gradient of a scalar function of the flat parameter values."""
    if step <= 0:
        raise ConfigurationError("step must be positive")
    x = params.values.copy()
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = lossfn(x)
        x[i] = orig - step
        fm = lossfn(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return ParamVector(g, list(params.layout))
