"""The continuous Forth machine: soft state and differentiable words.

State lives on probability simplexes: each stack/heap row is a
distribution over the v possible values, and the stack pointers,
program counter are distributions over positions. Every primitive word
becomes a map between such states built from four primitives: pointer
reads (a^T M), erase-and-add writes, circular shifts, and bilinear
contractions with the modular arithmetic tensors.

A batch of B examples is folded into the row dimension: memories are
(B*l, v), pointers (B, l), counters (B, p). With B=1 the shapes are
exactly the single-example ones.
"""

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import ForthError, RuntimeFault


@dataclass(frozen=True)
class MachineDims:
    """Stack size l and value size v."""

    l: int = 12
    v: int = 10

    def __post_init__(self):
        if self.l < 2 or self.v < 2:
            raise ForthError("machine dims must be >= 2, got l=%d v=%d" % (self.l, self.v))


@lru_cache(maxsize=None)
def shift_matrix(n, delta):
    """Circular shift permutation matrix: entry (i, j) = 1 iff i+delta = j mod n."""
    m = np.zeros((n, n))
    idx = np.arange(n)
    m[idx, (idx + delta) % n] = 1.0
    return m


@dataclass(frozen=True)
class ShiftMatrices:
    """Increment/decrement circular shifts for one width."""

    inc: np.ndarray
    dec: np.ndarray

    @classmethod
    def for_width(cls, n):
        return cls(inc=shift_matrix(n, 1), dec=shift_matrix(n, -1))


ARITH_OPS = ("+", "-", "*", "/")


@lru_cache(maxsize=None)
def op_tensor(v, op):
    """v^3 tensor with entry (i, j, k) = 1 iff i op j = k (mod v).

    Division is floor(i / j) mod v; the j=0 column maps to k=0.
    """
    i = np.arange(v)[:, None]
    j = np.arange(v)[None, :]
    if op == "+":
        k = (i + j) % v
    elif op == "-":
        k = (i - j) % v
    elif op == "*":
        k = (i * j) % v
    elif op == "/":
        jj = np.maximum(j, 1)
        k = (i // jj) % v
        k = np.where(j == 0, 0, k)
    else:
        raise ForthError("no operation tensor for %r" % op)
    t = np.zeros((v, v, v))
    ii, jj = np.meshgrid(np.arange(v), np.arange(v), indexing="ij")
    t[ii, jj, k] = 1.0
    return t


class OpTensors:
    """Lazy per-width cache of the four arithmetic tensors."""

    def __init__(self, v):
        self.v = v

    def __getitem__(self, op):
        return op_tensor(self.v, op)


@lru_cache(maxsize=None)
def _onehot_rows(width, index, batch):
    m = np.zeros((batch, width))
    m[:, index] = 1.0
    m.setflags(write=False)
    return m


@dataclass
class ContinuousState:
    """Soft machine state (batched; B=1 gives the spec shapes)."""

    D: object  # (B*l, v) data memory
    R: object  # (B*l, v) return memory
    H: object  # (B*l, v) heap
    d: object  # (B, l) data pointer
    r: object  # (B, l) return pointer
    c: object  # (B, p) program counter attention
    dims: MachineDims
    batch: int

    @property
    def program_width(self):
        return ad.val(self.c).shape[1]

    def with_(self, **kw):
        return replace(self, **kw)

    def values(self):
        """Plain-ndarray snapshot of every component."""
        return {k: ad.val(getattr(self, k)) for k in ("D", "R", "H", "d", "r", "c")}

    def check_simplex(self, tol=1e-9, entry_tol=-1e-12):
        """Assert pointer/counter simplex invariants; used heavily in tests."""
        for name in ("d", "r", "c"):
            a = ad.val(getattr(self, name))
            if not np.all(a >= entry_tol):
                raise AssertionError("%s has negative mass %g" % (name, a.min()))
            sums = a.sum(axis=1)
            if not np.allclose(sums, 1.0, atol=tol):
                raise AssertionError("%s mass off simplex: %s" % (name, sums))


def empty_state(dims, program_width, batch=1):
    """All memory rows hold value 0; pointers at row 0; counter at `entry` 0."""
    B, l, v = batch, dims.l, dims.v
    D = np.zeros((B * l, v))
    D[:, 0] = 1.0
    return ContinuousState(
        D=D, R=D.copy(), H=D.copy(),
        d=_onehot_rows(l, 0, B).copy(),
        r=_onehot_rows(l, 0, B).copy(),
        c=_onehot_rows(program_width, 0, B).copy(),
        dims=dims, batch=B,
    )


def state_from_stacks(dims, program_width, data_stacks, entry=0,
                      return_stacks=None, heaps=None):
    """Build a one-hot batched state from per-example integer stacks."""
    B = len(data_stacks)
    state = empty_state(dims, program_width, batch=B)
    l, v = dims.l, dims.v
    for b, stack in enumerate(data_stacks):
        if len(stack) >= l:
            raise ForthError("stack of depth %d does not fit l=%d" % (len(stack), l))
        for depth, value in enumerate(stack, start=1):
            state.D[b * l + depth, :] = 0.0
            state.D[b * l + depth, value % v] = 1.0
        state.d[b, :] = 0.0
        state.d[b, len(stack)] = 1.0
        if return_stacks is not None:
            for depth, value in enumerate(return_stacks[b], start=1):
                state.R[b * l + depth, :] = 0.0
                state.R[b * l + depth, value % v] = 1.0
            state.r[b, :] = 0.0
            state.r[b, len(return_stacks[b])] = 1.0
        if heaps is not None:
            for addr, value in heaps[b].items():
                state.H[b * l + addr, :] = 0.0
                state.H[b * l + addr, value % v] = 1.0
        state.c[b, :] = 0.0
        state.c[b, entry] = 1.0
    return state


# ---------------------------------------------------------------------------
# memory primitives


def read(M, a):
    """read_M(a) = a^T M, per block."""
    return ad.block_read(M, a)


def write(M, x, a):
    """write_M(x, a): M <- M - (a 1^T) . M + x a^T (erase then add)."""
    erased = ad.sub(M, ad.block_scale(M, a))
    return ad.add(erased, ad.block_outer(x, a))


def inc_ptr(a):
    return ad.roll_cols(a, 1)


def dec_ptr(a):
    return ad.roll_cols(a, -1)


def ptr_at(a, offset):
    """Pointer shifted by a relative offset (0 = TOS, -1 = NOS, ...)."""
    if offset == 0:
        return a
    return ad.roll_cols(a, offset)


def push(M, p, x):
    """Increment the pointer, then write x at the new top."""
    p2 = inc_ptr(p)
    return write(M, x, p2), p2


def pop(M, p):
    """Read the top, then decrement the pointer."""
    return read(M, p), dec_ptr(p)


def shift_value(x, delta):
    """Value increment/decrement by circular shift over width v."""
    return ad.roll_cols(x, delta)


def arith_values(op, a_nos, b_tos, tensors):
    """Distribution of NOS op TOS via the modular operation tensor."""
    return ad.pair_bilinear(a_nos, b_tos, tensors[op])


def pwl(x):
    """phi_pwl(x) = min(max(0, x + 0.5), 1)."""
    xv = ad.val(x)
    shifted = ad.add(x, np.full_like(xv, 0.5)) if isinstance(x, ad.Node) else xv + 0.5
    return ad.clamp(shifted, 0.0, 1.0)


def expectation(x, v):
    """Expected value sum_i i * x_i of a value distribution (B, v) -> (B,)."""
    return ad.matvec(x, np.arange(v, dtype=np.float64))


def compare_values(op, a_nos, b_tos, dims):
    """Truth probability of NOS op TOS.

    `>` and `<` compare expected values through phi_pwl; `=` is the dot
    product of the two distributions (1 iff identical one-hots).
    """
    if op == "=":
        prod = ad.hadamard(a_nos, b_tos)
        return ad.row_sum(prod)
    e_n = expectation(a_nos, dims.v)
    e_t = expectation(b_tos, dims.v)
    if op == ">":
        diff = ad.sub(e_n, e_t)
    elif op == "<":
        diff = ad.sub(e_t, e_n)
    else:
        raise ForthError("unknown comparison %r" % op)
    return pwl(diff)


def value_as_heap_ptr(x, dims, batch):
    """A width-v value distribution used to address the l heap rows.

    Truncates (v > l) or zero-pads (v < l); mass outside [0, l) is
    dropped, so compiled programs keep heap addresses below l.
    """
    l, v = dims.l, dims.v
    if v == l:
        return x
    if v > l:
        return ad.slice_cols(x, 0, l)
    pad = np.zeros((batch, l - v))
    return ad.concat([x, pad], axis=1)


# ---------------------------------------------------------------------------
# word application


def onehot_counter(width, index, batch):
    return _onehot_rows(width, index, batch)


def apply_word(op, arg, state, tensors, next_c, target_c=None, ret_info=None):
    """Apply one primitive word; returns the successor state.

    next_c: (B, p) counter the word emits when it falls through.
    target_c: (B, p) counter for BRANCH/BRANCH0/CALL jump targets.
    ret_info: (return_value_dist, remap) for CALL/RET; CALL pushes the
        (B, v) one-hot of its original return address, RET maps a popped
        width-v address through the (orig_p x plan_p) boundary matrix.
    """
    dims, B = state.dims, state.batch
    s = state

    if op == "LIT":
        x = _onehot_rows(dims.v, arg, B)
        D, d = push(s.D, s.d, x)
        return s.with_(D=D, d=d, c=next_c)

    if op in ("1+", "1-"):
        delta = 1 if op == "1+" else -1
        x = shift_value(read(s.D, s.d), delta)
        return s.with_(D=write(s.D, x, s.d), c=next_c)

    if op == "DUP":
        x = read(s.D, s.d)
        D, d = push(s.D, s.d, x)
        return s.with_(D=D, d=d, c=next_c)

    if op == "SWAP":
        below = ptr_at(s.d, -1)
        x = read(s.D, s.d)
        y = read(s.D, below)
        D = write(write(s.D, y, s.d), x, below)
        return s.with_(D=D, c=next_c)

    if op == "OVER":
        x = read(s.D, ptr_at(s.d, -1))
        D, d = push(s.D, s.d, x)
        return s.with_(D=D, d=d, c=next_c)

    if op == "DROP":
        return s.with_(d=dec_ptr(s.d), c=next_c)

    if op in ARITH_OPS:
        b_tos = read(s.D, s.d)
        a_nos = read(s.D, ptr_at(s.d, -1))
        res = arith_values(op, a_nos, b_tos, tensors)
        d = dec_ptr(s.d)
        return s.with_(D=write(s.D, res, d), d=d, c=next_c)

    if op in (">", "<", "="):
        b_tos = read(s.D, s.d)
        a_nos = read(s.D, ptr_at(s.d, -1))
        p = compare_values(op, a_nos, b_tos, dims)
        res = truth_dist(p, dims, B)
        d = dec_ptr(s.d)
        return s.with_(D=write(s.D, res, d), d=d, c=next_c)

    if op == "@":
        addr = value_as_heap_ptr(read(s.D, s.d), dims, B)
        x = read(s.H, addr)
        return s.with_(D=write(s.D, x, s.d), c=next_c)

    if op == "!":
        addr = value_as_heap_ptr(read(s.D, s.d), dims, B)
        x = read(s.D, ptr_at(s.d, -1))
        H = write(s.H, x, addr)
        return s.with_(H=H, d=ptr_at(s.d, -2), c=next_c)

    if op == ">R":
        x, d = pop(s.D, s.d)
        R, r = push(s.R, s.r, x)
        return s.with_(R=R, r=r, d=d, c=next_c)

    if op == "R>":
        x, r = pop(s.R, s.r)
        D, d = push(s.D, s.d, x)
        return s.with_(D=D, d=d, r=r, c=next_c)

    if op == "@R":
        x = read(s.R, s.r)
        D, d = push(s.D, s.d, x)
        return s.with_(D=D, d=d, c=next_c)

    if op == "BRANCH":
        return s.with_(c=target_c)

    if op == "BRANCH0":
        x, d = pop(s.D, s.d)
        p0 = ad.take_col(x, 0)  # mass on value 0 = probability FALSE
        c = _mix_counters(p0, target_c, next_c)
        return s.with_(d=d, c=c)

    if op == "CALL":
        ret_vec, _ = ret_info
        R, r = push(s.R, s.r, ret_vec)
        return s.with_(R=R, r=r, c=target_c)

    if op == "RET":
        _, remap = ret_info
        x, r = pop(s.R, s.r)
        addr = ad.slice_cols(x, 0, remap.shape[0])
        return s.with_(r=r, c=ad.matmul(addr, remap))

    if op == "HALT":
        return s

    if op == "NOP":
        return s.with_(c=next_c)

    if op == "SLOT":
        raise ForthError("SLOT transitions are applied by the sketch module")

    raise ForthError("unknown opcode %r" % op)


def truth_dist(p, dims, batch):
    one = _onehot_rows(dims.v, 1, batch)
    zero = _onehot_rows(dims.v, 0, batch)
    pv = ad.val(p)
    ones = np.ones_like(pv)
    not_p = ad.sub(ones, p) if isinstance(p, ad.Node) else ones - pv
    return ad.add(ad.scale_rows(one, p), ad.scale_rows(zero, not_p))


def _mix_counters(p0, taken_c, fallthrough_c):
    pv = ad.val(p0)
    ones = np.ones_like(pv)
    not_p0 = ad.sub(ones, p0) if isinstance(p0, ad.Node) else ones - pv
    return ad.add(ad.scale_rows(taken_c, p0), ad.scale_rows(fallthrough_c, not_p0))


# ---------------------------------------------------------------------------
# discrete <-> continuous bridges


def encode_discrete(dstate, dims, program_width):
    """One-hot continuous encoding of a discrete machine state (B=1)."""
    heap = {a: x for a, x in enumerate(dstate.H[: dims.l]) if x}
    state = state_from_stacks(
        dims, program_width,
        data_stacks=[list(dstate.D)],
        entry=dstate.c,
        return_stacks=[list(dstate.R)],
        heaps=[heap],
    )
    return state


def snapshot_ints(state):
    """Per-example argmax view: (stacks, rstacks, heaps, counters)."""
    v = state.values()
    B, l = v["d"].shape
    out = []
    for b in range(B):
        d_top = int(v["d"][b].argmax())
        r_top = int(v["r"][b].argmax())
        block = slice(b * l, (b + 1) * l)
        drows = v["D"][block].argmax(axis=1)
        rrows = v["R"][block].argmax(axis=1)
        hrows = v["H"][block].argmax(axis=1)
        out.append({
            "stack": [int(drows[i]) for i in range(1, d_top + 1)],
            "rstack": [int(rrows[i]) for i in range(1, r_top + 1)],
            "heap": {i: int(hrows[i]) for i in range(l) if hrows[i]},
            "pc": int(v["c"][b].argmax()),
        })
    return out
