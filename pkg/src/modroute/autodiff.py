"""Reverse-mode automatic differentiation on a flat tape of numpy ops.

Everything is float64. Values are computed eagerly when an op is recorded,
so a tape doubles as the forward pass. The one non-standard primitive is
``stop_grad``: identity on the forward pass, zero adjoint on the backward
pass. It is the building block for the residual stop-gradient used during
off-policy training of routed module networks.

The dispatch helpers at the bottom (``relu``, ``affine``, ``sg``, ...) accept
either plain numpy arrays or :class:`Var` handles, so the same network code
can run as a cheap inference pass or as a differentiable tape pass.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class TapeError(ValueError):
    """Raised on malformed op construction (shape mismatch, bad root, ...)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    # sum away leading axes added by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "nid")

    # defer mixed numpy/Var arithmetic to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.vals[self.nid]

    @property
    def shape(self):
        return self.tape.vals[self.nid].shape

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise TapeError("operands live on different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.record("sub", self, self._coerce(other))

    def __rsub__(self, other):
        return self.tape.record("sub", self._coerce(other), self)

    def __mul__(self, other):
        return self.tape.record("mul", self, self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.record("div", self, self._coerce(other))

    def __rtruediv__(self, other):
        return self.tape.record("div", self._coerce(other), self)

    def __neg__(self):
        return self.tape.record("neg", self)

    def __matmul__(self, other):
        return self.tape.record("matmul", self, self._coerce(other))

    def relu(self):
        return self.tape.record("relu", self)

    def tanh(self):
        return self.tape.record("tanh", self)

    def exp(self):
        return self.tape.record("exp", self)

    def log(self):
        return self.tape.record("log", self)

    def stop_grad(self):
        return self.tape.record("stop_grad", self)

    def sum(self, axis=None, keepdims=False):
        return self.tape.record("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        s = self.sum(axis=axis, keepdims=keepdims)
        n = self.value.size / s.value.size
        return s * (1.0 / n)

    def cols(self, j0: int, j1: int):
        """Slice columns [j0:j1] of a 2-D value."""
        return self.tape.record("cols", self, j0=j0, j1=j1)


class Tape:
    """Append-only record of operations; node ids are topologically ordered."""

    def __init__(self):
        self.vals: list[np.ndarray] = []
        self.ops: list[tuple] = []  # (kind, input-ids, aux dict)
        self.param_names: dict[int, str] = {}

    def _append(self, kind: str, val: np.ndarray, inputs: tuple, aux=None) -> Var:
        nid = len(self.vals)
        self.vals.append(val)
        self.ops.append((kind, inputs, aux))
        return Var(self, nid)

    def constant(self, x) -> Var:
        return self._append("constant", np.asarray(x, dtype=np.float64), ())

    def parameter(self, name: str, x) -> Var:
        v = self._append("parameter", np.asarray(x, dtype=np.float64), ())
        self.param_names[v.nid] = name
        return v

    def record(self, kind: str, *inputs: Var, **aux) -> Var:
        ids = tuple(v.nid for v in inputs)
        vals = [self.vals[i] for i in ids]
        try:
            out = _FORWARD[kind](vals, aux)
        except KeyError:
            raise TapeError(f"unknown op kind {kind!r}")
        except ValueError as e:
            shapes = [v.shape for v in vals]
            raise TapeError(f"op {kind!r} on shapes {shapes}: {e}") from e
        return self._append(kind, out, ids, aux or None)

    def backward(self, root: Var) -> dict[str, np.ndarray]:
        """Adjoints of ``root`` (a scalar) w.r.t. every parameter node.

        stop_grad nodes propagate a zero adjoint to their input. Repeated
        calls on an unchanged tape return identical results.
        """
        if root.tape is not self:
            raise TapeError("root lives on a different tape")
        if self.vals[root.nid].size != 1:
            raise TapeError(
                f"backward root must be scalar, got shape {self.vals[root.nid].shape}"
            )
        adj: list[np.ndarray | None] = [None] * len(self.vals)
        adj[root.nid] = np.ones_like(self.vals[root.nid])
        for nid in range(root.nid, -1, -1):
            g = adj[nid]
            if g is None:
                continue
            kind, inputs, aux = self.ops[nid]
            if kind in ("constant", "parameter", "stop_grad"):
                continue
            in_vals = [self.vals[i] for i in inputs]
            for iid, contrib in zip(inputs, _BACKWARD[kind](g, self.vals[nid], in_vals, aux)):
                if contrib is None:
                    continue
                if adj[iid] is None:
                    adj[iid] = contrib
                else:
                    adj[iid] = adj[iid] + contrib
        out = {}
        for nid, name in self.param_names.items():
            g = adj[nid]
            out[name] = np.zeros_like(self.vals[nid]) if g is None else g
        return out


# ---------------------------------------------------------------------------
# op tables

def _fwd_affine(vals, aux):
    x, w, b = vals
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"affine expects (B,m)@(m,k), got {x.shape} @ {w.shape}")
    return x @ w + b


def _fwd_sum(vals, aux):
    return np.sum(vals[0], axis=aux["axis"], keepdims=aux["keepdims"])


def _bwd_sum(g, out, vals, aux):
    x = vals[0]
    axis, keepdims = aux["axis"], aux["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _fwd_cols(vals, aux):
    x = vals[0]
    if x.ndim != 2:
        raise ValueError("cols expects a 2-D value")
    return x[:, aux["j0"]:aux["j1"]]


def _bwd_cols(g, out, vals, aux):
    gx = np.zeros_like(vals[0])
    gx[:, aux["j0"]:aux["j1"]] = g
    return (gx,)


def _fwd_gather(vals, aux):
    return vals[0][np.asarray(aux["idx"], dtype=np.intp)]


def _bwd_gather(g, out, vals, aux):
    gx = np.zeros_like(vals[0])
    np.add.at(gx, np.asarray(aux["idx"], dtype=np.intp), g)
    return (gx,)


def _fwd_where(vals, aux):
    a, b = vals
    return np.where(aux["cond"], a, b)


def _bwd_where(g, out, vals, aux):
    c = aux["cond"]
    return (
        _unbroadcast(np.where(c, g, 0.0), vals[0].shape),
        _unbroadcast(np.where(c, 0.0, g), vals[1].shape),
    )


def _fwd_minimum(vals, aux):
    return np.minimum(vals[0], vals[1])


def _bwd_minimum(g, out, vals, aux):
    a, b = vals
    take_a = a <= b  # ties go to the first argument
    return (
        _unbroadcast(np.where(take_a, g, 0.0), a.shape),
        _unbroadcast(np.where(take_a, 0.0, g), b.shape),
    )


def _fwd_concat(vals, aux):
    return np.concatenate(vals, axis=aux["axis"])


def _bwd_concat(g, out, vals, aux):
    sizes = [v.shape[aux["axis"]] for v in vals]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=aux["axis"]))


_FORWARD: dict[str, Callable] = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "div": lambda v, a: v[0] / v[1],
    "neg": lambda v, a: -v[0],
    "matmul": lambda v, a: v[0] @ v[1],
    "affine": _fwd_affine,
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "tanh": lambda v, a: np.tanh(v[0]),
    "exp": lambda v, a: np.exp(v[0]),
    "log": lambda v, a: np.log(v[0]),
    "stop_grad": lambda v, a: v[0],
    "sum": _fwd_sum,
    "cols": _fwd_cols,
    "gather_rows": _fwd_gather,
    "where_const": _fwd_where,
    "minimum": _fwd_minimum,
    "concat": _fwd_concat,
}

_BACKWARD: dict[str, Callable] = {
    "add": lambda g, o, v, a: (
        _unbroadcast(g, v[0].shape),
        _unbroadcast(g, v[1].shape),
    ),
    "sub": lambda g, o, v, a: (
        _unbroadcast(g, v[0].shape),
        _unbroadcast(-g, v[1].shape),
    ),
    "mul": lambda g, o, v, a: (
        _unbroadcast(g * v[1], v[0].shape),
        _unbroadcast(g * v[0], v[1].shape),
    ),
    "div": lambda g, o, v, a: (
        _unbroadcast(g / v[1], v[0].shape),
        _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape),
    ),
    "neg": lambda g, o, v, a: (-g,),
    "matmul": lambda g, o, v, a: (g @ v[1].T, v[0].T @ g),
    "affine": lambda g, o, v, a: (g @ v[1].T, v[0].T @ g, _unbroadcast(g, v[2].shape)),
    "relu": lambda g, o, v, a: (g * (v[0] > 0.0),),
    "tanh": lambda g, o, v, a: (g * (1.0 - o * o),),
    "exp": lambda g, o, v, a: (g * o,),
    "log": lambda g, o, v, a: (g / v[0],),
    "sum": _bwd_sum,
    "cols": _bwd_cols,
    "gather_rows": _bwd_gather,
    "where_const": _bwd_where,
    "minimum": _bwd_minimum,
    "concat": _bwd_concat,
}


# ---------------------------------------------------------------------------
# dual-backend helpers: accept Var or numpy, so the same network-building code
# serves both the fast inference path and the differentiable tape path.

def is_var(x) -> bool:
    return isinstance(x, Var)


def relu(x):
    return x.relu() if is_var(x) else np.maximum(x, 0.0)


def tanh(x):
    return x.tanh() if is_var(x) else np.tanh(x)


def exp(x):
    return x.exp() if is_var(x) else np.exp(x)


def log(x):
    return x.log() if is_var(x) else np.log(x)


def sg(x):
    """Stop-gradient: forward identity, blocks the backward pass."""
    return x.stop_grad() if is_var(x) else x


def value_of(x) -> np.ndarray:
    return x.value if is_var(x) else x


def affine(x, w, b):
    """x @ w + b, with the op fused into one tape node when differentiable."""
    if is_var(w):
        if not is_var(x):
            x = w.tape.constant(x)
        return w.tape.record("affine", x, w, b)
    return x @ w + b


def gather_rows(x, idx):
    if is_var(x):
        return x.tape.record("gather_rows", x, idx=np.asarray(idx))
    return x[np.asarray(idx, dtype=np.intp)]


def where_const(cond, a, b):
    """Elementwise select with a constant (non-differentiated) condition."""
    cond = np.asarray(cond, dtype=bool)
    if is_var(a):
        return a.tape.record("where_const", a, a._coerce(b), cond=cond)
    return np.where(cond, a, b)


def minimum(a, b):
    if is_var(a):
        return a.tape.record("minimum", a, a._coerce(b))
    return np.minimum(a, b)


def concat(parts, axis=1):
    if any(is_var(p) for p in parts):
        t = next(p.tape for p in parts if is_var(p))
        parts = [p if is_var(p) else t.constant(p) for p in parts]
        return t.record("concat", *parts, axis=axis)
    return np.concatenate(parts, axis=axis)


def vsum(x, axis=None, keepdims=False):
    return x.sum(axis=axis, keepdims=keepdims) if is_var(x) else np.sum(
        x, axis=axis, keepdims=keepdims
    )


# ---------------------------------------------------------------------------

def gradient_check(
    build: Callable[[Tape, dict[str, Var]], Var],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` records a scalar function of the given parameters on a fresh
    tape. Error metric per element: |analytic - fd| / max(1, |fd|).
    """

    def evaluate(pvals: dict[str, np.ndarray]):
        tape = Tape()
        pvars = {k: tape.parameter(k, v) for k, v in pvals.items()}
        root = build(tape, pvars)
        return tape, root

    tape, root = evaluate(params)
    analytic = tape.backward(root)

    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        flat = base.ravel()
        for j in range(flat.size):
            bumped = dict(params)
            plus = base.copy().ravel()
            plus[j] += epsilon
            bumped[name] = plus.reshape(base.shape)
            _, r = evaluate(bumped)
            f_plus = float(r.value)
            minus = base.copy().ravel()
            minus[j] -= epsilon
            bumped[name] = minus.reshape(base.shape)
            _, r = evaluate(bumped)
            f_minus = float(r.value)
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            an = analytic[name].ravel()[j]
            worst = max(worst, abs(an - fd) / max(1.0, abs(fd)))
    return worst
