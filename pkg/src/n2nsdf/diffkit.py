"""A small array-valued tape for the derivatives the SDF losses need.

The field's input gradient is computed in forward mode (value + tangent pairs),
but every forward-mode step is itself recorded on the tape as an ordinary node.
One reverse sweep over the tape therefore yields exact parameter gradients of
losses that contain ``grad_q f(q)`` -- the single mixed second order we need.

Nodes hold numpy arrays of any shape. Parameter leaves are named; gradients
come back keyed by name. Hash-table lookups produce row-sparse gradients
(:class:`SparseRows`) so the optimizer never has to touch untouched rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericFailure",
    "StructuralError",
    "SparseRows",
    "Var",
    "Tape",
    "DualVec3",
    "add", "sub", "mul", "div", "neg", "matmul", "softplus", "sigmoid",
    "square", "sqrt", "absolute", "relu", "sum", "mean", "norm", "concat",
    "reshape", "transpose", "take", "getitem", "gather_blend",
    "input_gradient", "loss_gradient",
]


class NumericFailure(FloatingPointError):
    """A non-finite value appeared on the tape."""

    def __init__(self, message: str, node: int | None = None, op: str | None = None):
        super().__init__(message)
        self.node = node
        self.op = op


class StructuralError(RuntimeError):
    """The tape cannot be differentiated as requested."""


@dataclass
class SparseRows:
    """Row-sparse gradient of a 2-D table: ``dense[rows[i]] += values[i]``."""

    rows: np.ndarray
    values: np.ndarray
    shape: tuple
    coalesced: bool = False

    def __add__(self, other):
        if isinstance(other, SparseRows):
            return SparseRows(np.concatenate([self.rows, other.rows]),
                              np.concatenate([self.values, other.values]), self.shape)
        return other + self.to_dense()

    __radd__ = __add__

    def coalesce(self) -> "SparseRows":
        """Merge duplicate rows (sorted ascending)."""
        if self.coalesced:
            return self
        uniq, inv = np.unique(self.rows, return_inverse=True)
        vals = self.values.reshape(len(self.rows), -1)
        # bincount per column is much faster than np.add.at
        out = np.stack([np.bincount(inv, weights=vals[:, j], minlength=len(uniq)) for j in range(vals.shape[1])],
                       axis=1)
        return SparseRows(uniq, out.astype(self.values.dtype).reshape((len(uniq),) + self.values.shape[1:]),
                          self.shape, True)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        np.add.at(out, self.rows, self.values)
        return out

    def __mul__(self, s):
        return SparseRows(self.rows, self.values * s, self.shape, self.coalesced)

    __rmul__ = __mul__


@dataclass
class _Node:
    op: str
    parents: tuple
    value: object
    forward: Callable | None = None
    backward: Callable | None = None
    name: str | None = None
    needs_grad: bool = False


class Var:
    """Handle to one node of a tape. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "idx", "value")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", idx: int, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(#{self.idx} {self.tape.nodes[self.idx].op}, shape={self.shape})" if self.tape.record \
            else f"Var(shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, key): return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of array operations.

    ``record=False`` gives a value-only tape (nothing is stored), used for bulk
    field evaluation where no derivatives are wanted.
    """

    def __init__(self, record: bool = True, check_finite: bool = True):
        self.record = record
        self.check_finite = check_finite
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    # -- leaves ---------------------------------------------------------
    def param(self, name: str, value) -> Var:
        """Differentiable leaf. ``value=None`` makes an unseeded leaf."""
        if not self.record:
            return Var(self, -1, value)
        self.nodes.append(_Node("param", (), value, name=name, needs_grad=True))
        return Var(self, len(self.nodes) - 1, value)

    def const(self, value) -> Var:
        if isinstance(value, Var):
            return value
        value = np.asarray(value) if not np.isscalar(value) else value
        if not self.record:
            return Var(self, -1, value)
        self.nodes.append(_Node("const", (), value))
        return Var(self, len(self.nodes) - 1, value)

    def params(self) -> dict[str, Var]:
        return {n.name: Var(self, i, n.value) for i, n in enumerate(self.nodes) if n.op == "param"}

    # -- recording ------------------------------------------------------
    def _push(self, op, parents: Sequence[Var], forward, backward) -> Var:
        vals = [p.value for p in parents]
        for v in vals:
            if v is None:
                raise StructuralError(f"op '{op}' consumes an unseeded leaf")
        out = forward(*vals)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NumericFailure(f"non-finite output from op '{op}' at node {len(self.nodes)}",
                                 node=len(self.nodes), op=op)
        if not self.record:
            return Var(self, -1, out)
        needs = any(self.nodes[p.idx].needs_grad for p in parents)
        self.nodes.append(_Node(op, tuple(p.idx for p in parents), out, forward, backward,
                                needs_grad=needs))
        return Var(self, len(self.nodes) - 1, out)

    # -- replay / reverse -------------------------------------------------
    def replay(self, params: dict | None = None) -> list:
        """Recompute every node from the leaves; ``params`` overrides named leaves."""
        params = params or {}
        vals = []
        for n in self.nodes:
            if n.op == "param":
                vals.append(params.get(n.name, n.value))
            elif n.op == "const":
                vals.append(n.value)
            else:
                vals.append(n.forward(*[vals[p] for p in n.parents]))
        return vals

    def backward(self, out: Var, seed=None) -> dict[str, object]:
        """Reverse sweep from ``out``; returns gradients keyed by parameter name."""
        if not self.record:
            raise StructuralError("value-only tape has no record to differentiate")
        if out.tape is not self:
            raise StructuralError("output belongs to a different tape")
        nodes = self.nodes
        grads: dict[int, object] = {}
        if seed is None:
            if np.size(out.value) != 1:
                raise StructuralError("reverse sweep needs a scalar output or an explicit seed")
            seed = np.ones_like(out.value)
        grads[out.idx] = seed
        for i in range(out.idx, -1, -1):
            g = grads.pop(i, None) if nodes[i].op != "param" else grads.get(i)
            if g is None:
                continue
            n = nodes[i]
            if n.op in ("param", "const") or not n.needs_grad:
                continue
            if any(p >= i for p in n.parents):
                raise StructuralError(f"node {i} ({n.op}) references a later node: cycle")
            pvals = [nodes[p].value for p in n.parents]
            pgrads = n.backward(g, n.value, *pvals)
            for p, pg in zip(n.parents, pgrads):
                if pg is None or not nodes[p].needs_grad:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        res = {}
        for i, n in enumerate(nodes[: out.idx + 1]):
            if n.op == "param":
                if n.value is None:
                    raise StructuralError(f"parameter leaf '{n.name}' was never seeded")
                g = grads.get(i)
                if g is None:
                    g = np.zeros_like(n.value)
                res[n.name] = g
        return res


# ---------------------------------------------------------------------------
# helpers

def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise StructuralError("operation has no tape operand")


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _unbroadcast(g, shape):
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op, a, b, fwd, bwd):
    t = _tape_of(a, b)
    return t._push(op, (_lift(t, a), _lift(t, b)), fwd, bwd)


def _unary(op, x, fwd, bwd):
    return x.tape._push(op, (x,), fwd, bwd)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    return _binary("add", a, b, np.add,
                   lambda g, out, x, y: (_unbroadcast(g, np.shape(x)), _unbroadcast(g, np.shape(y))))


def sub(a, b):
    return _binary("sub", a, b, np.subtract,
                   lambda g, out, x, y: (_unbroadcast(g, np.shape(x)), _unbroadcast(-g, np.shape(y))))


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, out, x, y: (_unbroadcast(g * y, np.shape(x)), _unbroadcast(g * x, np.shape(y))))


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda g, out, x, y: (_unbroadcast(g / y, np.shape(x)),
                                         _unbroadcast(-g * out / y, np.shape(y))))


def neg(x):
    return _unary("neg", x, np.negative, lambda g, out, v: (-g,))


def square(x):
    return _unary("square", x, np.square, lambda g, out, v: (2.0 * g * v,))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, out, v: (g * 0.5 / out,))


def absolute(x):
    return _unary("abs", x, np.abs, lambda g, out, v: (g * np.sign(v),))


def relu(x):
    """max(0, x); the kink gets subgradient 0."""
    return _unary("relu", x, lambda v: np.maximum(v, 0), lambda g, out, v: (g * (v > 0),))


_EXP_CLIP = 80.0


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_EXP_CLIP, _EXP_CLIP)))


def softplus(x, beta: float = 100.0):
    """log(1 + exp(beta x)) / beta, stable for large |beta x|."""
    def fwd(v):
        z = beta * v
        # the clip keeps exp() out of the subnormal range, which is very slow
        return (np.maximum(z, 0) + np.log1p(np.exp(-np.minimum(np.abs(z), _EXP_CLIP)))) / beta

    return _unary("softplus", x, fwd, lambda g, out, v: (g * _logistic(beta * v),))


def sigmoid(x, beta: float = 1.0):
    """logistic(beta x): the derivative of ``softplus(x, beta)``."""
    def fwd(v):
        return _logistic(beta * v)

    return _unary("sigmoid", x, fwd, lambda g, out, v: (g * beta * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def bwd(g, out, v):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, np.shape(v)).copy(),)

    return _unary("sum", x, lambda v: np.sum(v, axis=axis, keepdims=keepdims), bwd)


def mean(x, axis=None, keepdims=False):
    n = np.size(x.value) if axis is None else np.shape(x.value)[axis]
    if n == 0:
        # empty reduction: defined as 0 so empty batches contribute nothing
        return x.tape.const(np.zeros(()) if axis is None else np.zeros(np.sum(x.value, axis=axis, keepdims=keepdims).shape))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def norm(x, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; gradient is 0 where the norm is 0."""
    def fwd(v):
        return np.sqrt(np.sum(v * v, axis=axis, keepdims=keepdims))

    def bwd(g, out, v):
        o = out if keepdims else np.expand_dims(out, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(o > 0, o, 1.0)
        return (gg * v / safe * (o > 0),)

    return _unary("norm", x, fwd, bwd)


def concat(xs: Sequence, axis=-1):
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    sizes = [np.shape(x.value)[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def fwd(*vs):
        return np.concatenate(vs, axis=axis)

    def bwd(g, out, *vs):
        return tuple(np.split(g, splits, axis=axis))

    return t._push("concat", xs, fwd, bwd)


def reshape(x, shape):
    def bwd(g, out, v):
        return (np.reshape(g, np.shape(v)),)

    return _unary("reshape", x, lambda v: np.reshape(v, shape), bwd)


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)

    def bwd(g, out, v):
        return (np.transpose(g, inv),)

    return _unary("transpose", x, lambda v: np.transpose(v, axes), bwd)


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in keys)


def getitem(x, key):
    basic = _is_basic(key)

    def bwd(g, out, v):
        z = np.zeros_like(v)
        if basic:  # no repeated elements, plain assignment suffices
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _unary("getitem", x, lambda v: v[key], bwd)


def take(x, idx, axis=0):
    """Select rows (or entries along ``axis``) by integer index."""
    idx = np.asarray(idx)

    def bwd(g, out, v):
        z = np.zeros_like(v)
        sl = [slice(None)] * np.ndim(v)
        gz = np.moveaxis(z, axis, 0)
        np.add.at(gz, idx, np.moveaxis(g, axis, 0))
        return (z,)

    return _unary("take", x, lambda v: np.take(v, idx, axis=axis), bwd)


def _flush_subnormal(g):
    # BLAS slows down by an order of magnitude on subnormal inputs, which
    # appear late in training where saturated units pass on tiny gradients
    g = np.asarray(g)
    if g.dtype.kind != "f":
        return g
    return np.where(np.abs(g) < np.finfo(g.dtype).tiny, g.dtype.type(0), g)


def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D (weights) or ``a`` is 2-D."""
    def bwd(g, out, x, w):
        g = _flush_subnormal(g)
        if np.ndim(w) == 2:
            gx = g @ w.T
            k = w.shape[0]
            gw = np.reshape(x, (-1, k)).T @ np.reshape(g, (-1, w.shape[1]))
            return gx, gw
        gx = _unbroadcast(g @ np.swapaxes(w, -1, -2), np.shape(x))
        gw = _unbroadcast(np.swapaxes(x, -1, -2) @ g, np.shape(w))
        return gx, gw

    return _binary("matmul", a, b, np.matmul, bwd)


def gather_blend(table, idx, coef):
    """out[k, b] = sum_c coef[k, b, c] * table[idx[b, c]].

    ``idx`` (B, C) and ``coef`` (K, B, C) are constants; only ``table`` (T, F)
    is differentiated, and its gradient is row-sparse.
    """
    idx = np.asarray(idx)
    coef = np.asarray(coef)

    def fwd(tab):
        rows = tab[idx]  # (B, C, F)
        # batched matmul beats einsum by ~10x for these tiny contractions
        return np.matmul(coef.transpose(1, 0, 2), rows).transpose(1, 0, 2)

    def bwd(g, out, tab):
        vals = np.matmul(coef.transpose(1, 2, 0), g.transpose(1, 0, 2))
        return (SparseRows(idx.reshape(-1), vals.reshape(-1, tab.shape[1]), tab.shape),)

    return _unary("gather_blend", table, fwd, bwd)


# ---------------------------------------------------------------------------
# forward-mode values over the tape

class DualVec3:
    """A batch of values with tangents for three seed directions.

    ``value`` has shape (B, k); ``tangent`` has shape (3, B, k): the derivative
    of ``value`` along each input axis. Both are tape nodes, so whatever is
    computed from the tangent can be reverse-differentiated later.
    """

    __slots__ = ("value", "tangent")

    def __init__(self, value: Var, tangent: Var):
        self.value = value
        self.tangent = tangent

    @classmethod
    def seed(cls, tape: Tape, q) -> "DualVec3":
        """Identity seed: the tangent of q along axis i is e_i."""
        q = np.asarray(q)
        eye = np.broadcast_to(np.eye(3, dtype=q.dtype)[:, None, :], (3, q.shape[0], 3)).copy()
        return cls(tape.const(q), tape.const(eye))

    def affine(self, w: Var, b: Var) -> "DualVec3":
        return DualVec3(self.value @ w + b, self.tangent @ w)

    def softplus(self, beta: float) -> "DualVec3":
        return DualVec3(softplus(self.value, beta), sigmoid(self.value, beta) * self.tangent)

    @staticmethod
    def concat(parts: Sequence["DualVec3"]) -> "DualVec3":
        return DualVec3(concat([p.value for p in parts], axis=-1),
                        concat([p.tangent for p in parts], axis=-1))

    def gradient(self) -> Var:
        """(B, 3) gradient of a scalar-per-row dual (k == 1)."""
        return transpose(reshape(self.tangent, (3, -1)))


# ---------------------------------------------------------------------------
# public entry points (field-facing)

def input_gradient(params, q) -> np.ndarray:
    """Gradient of the field with respect to its input at ``q`` ((3,) or (B, 3))."""
    from .field import record_field

    q = np.asarray(q, dtype=np.result_type(params.dtype, np.float32))
    single = q.ndim == 1
    tape = Tape()
    _, grad = record_field(tape, params, np.atleast_2d(q))
    g = grad.value
    return g[0] if single else g


def loss_gradient(params, loss_graph: Tape, loss: Var | None = None) -> dict[str, object]:
    """Gradient of a recorded scalar loss with respect to every parameter array.

    ``loss`` defaults to the last node on the tape. Parameters that the loss
    does not touch (or an empty tape) receive zero gradients.
    """
    names = params.names()
    if loss is None:
        if len(loss_graph) == 0:
            return {k: np.zeros_like(v) for k, v in params.arrays.items()}
        loss = Var(loss_graph, len(loss_graph) - 1, loss_graph.nodes[-1].value)
    grads = loss_graph.backward(loss)
    out = {}
    for k in names:
        g = grads.get(k)
        out[k] = np.zeros_like(params.arrays[k]) if g is None else g
    return out
