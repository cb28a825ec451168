"""Minimal reverse-mode automatic differentiation over numpy arrays.

Values are float64 scalars, vectors or matrices. Graphs are built
define-by-run on an explicit Tape: every op that touches at least one
Node appends a record, and `backward` runs one reverse sweep over the
records. Ops called on plain ndarrays stay plain ndarrays, which gives
a zero-overhead evaluation path for gradient-free runs.

A handful of "block" ops treat a 2-D matrix as a batch of row blocks
(shape (B*l, v) with a companion (B, l) pointer); these keep every Node
at rank <= 2 while letting callers vectorize over a batch.
"""

import json
import math
import os

import numpy as np

from .errors import ForthError, ShapeMismatch

_EPS = 1e-12

_TAPES = []


class Node:
    __slots__ = ("value", "grad", "parents")

    def __init__(self, value, parents=()):
        self.value = value
        self.grad = None
        self.parents = parents

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return "Node(shape=%s)" % (self.shape,)


class Tape:
    """Records nodes in creation order; one backward sweep per tape."""

    def __init__(self):
        self.nodes = []
        self.param_leaves = {}
        self._swept = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def leaf(self, value, name=None):
        node = Node(np.asarray(value, dtype=np.float64))
        self.nodes.append(node)
        if name is not None:
            if name in self.param_leaves:
                raise ForthError("parameter %r bound twice on one tape" % name)
            self.param_leaves[name] = node
        return node

    def backward(self, loss):
        if self._swept:
            raise ForthError("backward called twice without reset")
        if not isinstance(loss, Node):
            raise ForthError("loss is not a Node (no parameters reached it)")
        if np.size(loss.value) != 1:
            raise ForthError("loss must be scalar, got shape %s" % (loss.shape,))
        self._swept = True
        loss.grad = np.ones_like(np.asarray(loss.value, dtype=np.float64))
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    parent.grad += contrib

    def reset(self):
        """Zero every accumulator so the tape can be swept again."""
        for node in self.nodes:
            node.grad = None
        self._swept = False

    def grads(self):
        """Gradients of bound parameters; exact zeros where unused."""
        out = {}
        for name, leaf in self.param_leaves.items():
            if leaf.grad is None:
                out[name] = np.zeros_like(leaf.value)
            else:
                out[name] = leaf.grad
        return out


def _tape():
    if not _TAPES:
        raise ForthError("no active Tape (wrap the computation in `with Tape():`)")
    return _TAPES[-1]


def val(x):
    """Underlying ndarray of a Node or array-like."""
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _record(out_value, parents):
    node = Node(out_value, tuple(parents))
    _tape().nodes.append(node)
    return node


def _unary(x, out_value, vjp):
    if isinstance(x, Node):
        return _record(out_value, [(x, vjp)])
    return out_value


def _binary(a, b, out_value, vjp_a, vjp_b):
    parents = []
    if isinstance(a, Node):
        parents.append((a, vjp_a))
    if isinstance(b, Node):
        parents.append((b, vjp_b))
    if parents:
        return _record(out_value, parents)
    return out_value


def _check(op, cond, *shapes):
    if not cond:
        raise ShapeMismatch(op, *shapes)


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b):
    av, bv = val(a), val(b)
    _check("add", av.shape == bv.shape, av.shape, bv.shape)
    return _binary(a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b):
    av, bv = val(a), val(b)
    _check("sub", av.shape == bv.shape, av.shape, bv.shape)
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g)


def hadamard(a, b):
    av, bv = val(a), val(b)
    _check("hadamard", av.shape == bv.shape, av.shape, bv.shape)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def scalarmul(c, x):
    c = float(c)
    return _unary(x, c * val(x), lambda g: c * g)


def matmul(a, b):
    av, bv = val(a), val(b)
    _check("matmul", av.ndim == 2 and bv.ndim == 2 and av.shape[1] == bv.shape[0],
           av.shape, bv.shape)
    return _binary(a, b, av @ bv, lambda g: g @ bv.T, lambda g: av.T @ g)


def matvec(m, x):
    mv, xv = val(m), val(x)
    _check("matvec", mv.ndim == 2 and xv.ndim == 1 and mv.shape[1] == xv.shape[0],
           mv.shape, xv.shape)
    return _binary(m, x, mv @ xv, lambda g: np.outer(g, xv), lambda g: mv.T @ g)


def vecmat(a, m):
    av, mv = val(a), val(m)
    _check("vecmat", av.ndim == 1 and mv.ndim == 2 and av.shape[0] == mv.shape[0],
           av.shape, mv.shape)
    return _binary(a, m, av @ mv, lambda g: mv @ g, lambda g: np.outer(av, g))


def dot(a, b):
    av, bv = val(a), val(b)
    _check("dot", av.shape == bv.shape and av.ndim == 1, av.shape, bv.shape)
    return _binary(a, b, av @ bv, lambda g: g * bv, lambda g: g * av)


def outer(a, b):
    av, bv = val(a), val(b)
    _check("outer", av.ndim == 1 and bv.ndim == 1, av.shape, bv.shape)
    return _binary(a, b, np.outer(av, bv), lambda g: g @ bv, lambda g: g.T @ av)


def concat(parts, axis=1):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    parents = []
    offset = 0
    for p, pv in zip(parts, vals):
        width = pv.shape[axis]
        if isinstance(p, Node):
            lo, hi = offset, offset + width
            if axis == 0:
                parents.append((p, lambda g, lo=lo, hi=hi: g[lo:hi]))
            else:
                parents.append((p, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
        offset += width
    if parents:
        return _record(out, parents)
    return out


def slice_cols(x, lo, hi):
    xv = val(x)

    def vjp(g):
        full = np.zeros_like(xv)
        full[..., lo:hi] = g
        return full

    return _unary(x, xv[..., lo:hi].copy(), vjp)


def take_col(x, j):
    """Column j of a matrix as a vector."""
    xv = val(x)
    _check("take_col", xv.ndim == 2, xv.shape)

    def vjp(g):
        full = np.zeros_like(xv)
        full[:, j] = g
        return full

    return _unary(x, xv[:, j].copy(), vjp)


def add_rowvec(m, b):
    mv, bv = val(m), val(b)
    _check("add_rowvec", mv.ndim == 2 and bv.ndim == 1 and mv.shape[1] == bv.shape[0],
           mv.shape, bv.shape)
    return _binary(m, b, mv + bv[None, :], lambda g: g, lambda g: g.sum(axis=0))


def scale_rows(m, s):
    """Scale row i of m by s[i]."""
    mv, sv = val(m), val(s)
    _check("scale_rows", mv.ndim == 2 and sv.ndim == 1 and mv.shape[0] == sv.shape[0],
           mv.shape, sv.shape)
    return _binary(m, s, mv * sv[:, None],
                   lambda g: g * sv[:, None],
                   lambda g: (g * mv).sum(axis=1))


def row_sum(m):
    mv = val(m)
    _check("row_sum", mv.ndim == 2, mv.shape)
    return _unary(m, mv.sum(axis=1), lambda g: np.repeat(g[:, None], mv.shape[1], axis=1))


def sum_all(x):
    xv = val(x)
    return _unary(x, np.asarray(xv.sum()), lambda g: np.broadcast_to(g, xv.shape).copy())


def reciprocal(x):
    xv = val(x)
    safe = np.maximum(xv, _EPS)
    out = 1.0 / safe
    return _unary(x, out, lambda g: -g / (safe * safe))


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x):
    xv = val(x)
    out = 1.0 / (1.0 + np.exp(-xv))
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def tanh(x):
    xv = val(x)
    out = np.tanh(xv)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def log(x):
    """Natural log, clamped at 1e-12 to keep cross-entropy finite."""
    xv = val(x)
    safe = np.maximum(xv, _EPS)
    return _unary(x, np.log(safe), lambda g: g / safe)


def softmax(x):
    """Row-wise (last axis) softmax, stabilized by max subtraction."""
    xv = val(x)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - inner)

    return _unary(x, out, vjp)


def clamp(x, lo, hi):
    xv = val(x)
    out = np.clip(xv, lo, hi)
    inside = ((xv > lo) & (xv < hi)).astype(np.float64)
    return _unary(x, out, lambda g: g * inside)


def roll_cols(x, shift):
    """Circular shift along the last axis; +1 moves index i to i+1."""
    xv = val(x)
    out = np.roll(xv, shift, axis=-1)
    return _unary(x, out, lambda g: np.roll(g, -shift, axis=-1))


# ---------------------------------------------------------------------------
# block ops: m is (B*l, v), a is (B, l), x is (B, v)


def _block_dims(op, m_shape, a_shape):
    B, l = a_shape
    _check(op, len(m_shape) == 2 and m_shape[0] == B * l, m_shape, a_shape)
    return B, l, m_shape[1]


def block_read(m, a):
    """Per-block pointer read: out[b] = a[b] @ m_block[b]."""
    mv, av = val(m), val(a)
    B, l, v = _block_dims("block_read", mv.shape, av.shape)
    m3 = mv.reshape(B, l, v)
    out = np.einsum("blv,bl->bv", m3, av)

    def vjp_m(g):
        return (av[:, :, None] * g[:, None, :]).reshape(B * l, v)

    def vjp_a(g):
        return np.einsum("blv,bv->bl", m3, g)

    return _binary(m, a, out, vjp_m, vjp_a)


def block_scale(m, a):
    """Scale row (b, i) of m by a[b, i]."""
    mv, av = val(m), val(a)
    B, l, v = _block_dims("block_scale", mv.shape, av.shape)
    flat = av.reshape(B * l, 1)
    out = mv * flat

    def vjp_a(g):
        return (g * mv).reshape(B, l, v).sum(axis=2)

    return _binary(m, a, out, lambda g: g * flat, vjp_a)


def block_outer(x, a):
    """Per-block outer product: row (b, i) of result is a[b, i] * x[b]."""
    xv, av = val(x), val(a)
    B, l = av.shape
    _check("block_outer", xv.ndim == 2 and xv.shape[0] == B, xv.shape, av.shape)
    v = xv.shape[1]
    out = (av[:, :, None] * xv[:, None, :]).reshape(B * l, v)

    def vjp_x(g):
        return np.einsum("blv,bl->bv", g.reshape(B, l, v), av)

    def vjp_a(g):
        return np.einsum("blv,bv->bl", g.reshape(B, l, v), xv)

    return _binary(x, a, out, vjp_x, vjp_a)


def block_row_scale(m, s):
    """Scale every row of block b by the scalar s[b]."""
    mv, sv = val(m), val(s)
    _check("block_row_scale", mv.ndim == 2 and sv.ndim == 1 and mv.shape[0] % sv.shape[0] == 0,
           mv.shape, sv.shape)
    B = sv.shape[0]
    l = mv.shape[0] // B
    rep = np.repeat(sv, l)[:, None]
    out = mv * rep

    def vjp_s(g):
        return (g * mv).reshape(B, l, -1).sum(axis=(1, 2))

    return _binary(m, s, out, lambda g: g * rep, vjp_s)


def pair_bilinear(a, b, t):
    """out[n, k] = sum_ij a[n, i] * b[n, j] * t[i, j, k]; t is constant."""
    av, bv, tv = val(a), val(b), np.asarray(t)
    _check("pair_bilinear", av.shape == bv.shape and av.ndim == 2
           and tv.shape == (av.shape[1],) * 3, av.shape, bv.shape, tv.shape)
    out = np.einsum("ni,nj,ijk->nk", av, bv, tv, optimize=True)

    def vjp_a(g):
        return np.einsum("nk,nj,ijk->ni", g, bv, tv, optimize=True)

    def vjp_b(g):
        return np.einsum("nk,ni,ijk->nj", g, av, tv, optimize=True)

    return _binary(a, b, out, vjp_a, vjp_b)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 tensors; each name registered exactly once."""

    def __init__(self):
        self._values = {}

    def register(self, name, value):
        if name in self._values:
            raise ForthError("parameter %r registered twice" % name)
        self._values[name] = np.array(value, dtype=np.float64)
        return self._values[name]

    def __contains__(self, name):
        return name in self._values

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        if name not in self._values:
            raise KeyError(name)
        self._values[name] = np.asarray(value, dtype=np.float64)

    def items(self):
        return self._values.items()

    def names(self):
        return list(self._values)

    def copy(self):
        out = ParamStore()
        for name, value in self._values.items():
            out.register(name, value.copy())
        return out

    def bind(self, tape=None):
        """Leaf Nodes per parameter (with a tape) or raw arrays (without)."""
        if tape is None:
            return dict(self._values)
        return {name: tape.leaf(value, name) for name, value in self._values.items()}

    # -- checkpoint io: <stem>.json index + <stem>.bin of little-endian f64

    def save(self, stem):
        stem = str(stem)
        index = {"dtype": "<f8", "tensors": {}}
        blob = bytearray()
        for name, value in self._values.items():
            raw = value.astype("<f8").tobytes()
            index["tensors"][name] = {
                "shape": list(value.shape),
                "offset": len(blob),
                "size": len(raw),
            }
            blob.extend(raw)
        with open(stem + ".bin", "wb") as fh:
            fh.write(bytes(blob))
        with open(stem + ".json", "w") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, stem):
        stem = str(stem)
        with open(stem + ".json") as fh:
            index = json.load(fh)
        with open(stem + ".bin", "rb") as fh:
            blob = fh.read()
        store = cls()
        for name, meta in index["tensors"].items():
            raw = blob[meta["offset"] : meta["offset"] + meta["size"]]
            arr = np.frombuffer(raw, dtype="<f8").reshape(meta["shape"]).copy()
            store.register(name, arr)
        return store


def xavier_uniform(shape, rng):
    """uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in = fan_out = shape[0]
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f, store, eps=1e-5):
    """Max relative error |analytic - numeric| / max(1, |numeric|).

    `f(params)` must rebuild its graph from the given name->Node (or
    name->ndarray) mapping and return a scalar. NaN anywhere is
    reported as math.inf rather than masked.
    """
    with Tape() as tape:
        loss = f(store.bind(tape))
        if not isinstance(loss, Node):
            raise ForthError("grad_check: f returned a constant")
        tape.backward(loss)
        analytic = tape.grads()
    if not np.isfinite(val(loss)):
        return math.inf

    def eval_loss():
        out = f(store.bind(None))
        return float(val(out))

    worst = 0.0
    for name, base in store.items():
        flat = base.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            hi = eval_loss()
            flat[idx] = keep - eps
            lo = eval_loss()
            flat[idx] = keep
            if not (math.isfinite(hi) and math.isfinite(lo)):
                return math.inf
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(a_flat[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
