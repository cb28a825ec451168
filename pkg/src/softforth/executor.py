"""Execution of lowered programs on the continuous machine.

A program becomes an ExecutionPlan: a sequence of transitions, each
producing a full successor state. One RNN step evaluates the
transitions the counter attends to and mixes the results:

    S' = sum_i c_i * w_i(S)

Two optimizations shrink plans. Straight-line runs (no branch entry or
exit points, no calls, no slots) are symbolically executed at plan
build time: the run's net effect is derived by diffing a symbolic
state against the initial one, and replayed as one transition.
IF regions without calls, loops or slots inside are interpolated: both
bodies run on the same state and the outputs are blended by the branch
condition probability.

Return addresses always live in the original instruction index space;
RET routes a popped address through a static boundary matrix into plan
positions, so naive and optimized plans leave bit-identical stacks.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import machine as mc
from . import slots as sl
from .errors import ForthError, RuntimeFault

_SIMPLE_OPS = {
    "LIT", "1+", "1-", "DUP", "SWAP", "OVER", "DROP",
    "+", "-", "*", "/", ">", "<", "=", ">R", "R>", "@R", "@", "!",
}


# ---------------------------------------------------------------------------
# symbolic execution of straight-line runs


class _Symbolic:
    """Symbolic machine over one run; cells keyed by offsets from the
    original pointers, heap cells by constant address."""

    def __init__(self):
        self.d_off = 0
        self.r_off = 0
        self.dcells = {}
        self.rcells = {}
        self.hcells = {}

    def read_d(self, off):
        return self.dcells.get(off, ("stack", "D", off))

    def read_r(self, off):
        return self.rcells.get(off, ("stack", "R", off))

    def feed(self, ins):
        """Absorb one instruction; returns False if it cannot be collapsed."""
        op = ins.op
        if op == "LIT":
            self.d_off += 1
            self.dcells[self.d_off] = ("lit", ins.arg)
        elif op in ("1+", "1-"):
            delta = 1 if op == "1+" else -1
            self.dcells[self.d_off] = ("shift", self.read_d(self.d_off), delta)
        elif op == "DUP":
            x = self.read_d(self.d_off)
            self.d_off += 1
            self.dcells[self.d_off] = x
        elif op == "SWAP":
            x, y = self.read_d(self.d_off), self.read_d(self.d_off - 1)
            self.dcells[self.d_off] = y
            self.dcells[self.d_off - 1] = x
        elif op == "OVER":
            x = self.read_d(self.d_off - 1)
            self.d_off += 1
            self.dcells[self.d_off] = x
        elif op == "DROP":
            self.d_off -= 1
        elif op in ("+", "-", "*", "/"):
            a, b = self.read_d(self.d_off - 1), self.read_d(self.d_off)
            self.d_off -= 1
            self.dcells[self.d_off] = ("arith", op, a, b)
        elif op in (">", "<", "="):
            a, b = self.read_d(self.d_off - 1), self.read_d(self.d_off)
            self.d_off -= 1
            self.dcells[self.d_off] = ("cmp", op, a, b)
        elif op == ">R":
            x = self.read_d(self.d_off)
            self.d_off -= 1
            self.r_off += 1
            self.rcells[self.r_off] = x
        elif op == "R>":
            x = self.read_r(self.r_off)
            self.r_off -= 1
            self.d_off += 1
            self.dcells[self.d_off] = x
        elif op == "@R":
            x = self.read_r(self.r_off)
            self.d_off += 1
            self.dcells[self.d_off] = x
        elif op == "@":
            addr = _const_of(self.read_d(self.d_off))
            if addr is None:
                return False
            self.dcells[self.d_off] = self.hcells.get(addr, ("heap", addr))
        elif op == "!":
            addr = _const_of(self.read_d(self.d_off))
            if addr is None:
                return False
            x = self.read_d(self.d_off - 1)
            self.d_off -= 2
            self.hcells[addr] = x
        else:
            return False
        return True


def _const_of(expr):
    return expr[1] if expr[0] == "lit" else None


def _eval_expr(expr, state, ptr_cache, memo, tensors):
    key = id(expr)
    if key in memo:
        return memo[key]
    kind = expr[0]
    if kind == "stack":
        _, area, off = expr
        base = state.d if area == "D" else state.r
        if off not in ptr_cache[area]:
            ptr_cache[area][off] = mc.ptr_at(base, off)
        memory = state.D if area == "D" else state.R
        out = mc.read(memory, ptr_cache[area][off])
    elif kind == "lit":
        out = mc.onehot_counter(state.dims.v, expr[1], state.batch)
    elif kind == "heap":
        ptr = np.zeros((state.batch, state.dims.l))
        ptr[:, expr[1]] = 1.0
        out = mc.read(state.H, ptr)
    elif kind == "shift":
        out = mc.shift_value(_eval_expr(expr[1], state, ptr_cache, memo, tensors), expr[2])
    elif kind == "arith":
        a = _eval_expr(expr[2], state, ptr_cache, memo, tensors)
        b = _eval_expr(expr[3], state, ptr_cache, memo, tensors)
        out = mc.arith_values(expr[1], a, b, tensors)
    elif kind == "cmp":
        a = _eval_expr(expr[2], state, ptr_cache, memo, tensors)
        b = _eval_expr(expr[3], state, ptr_cache, memo, tensors)
        p = mc.compare_values(expr[1], a, b, state.dims)
        out = mc.truth_dist(p, state.dims, state.batch)
    else:
        raise ForthError("unknown symbolic expression %r" % (expr,))
    memo[key] = out
    return out


# ---------------------------------------------------------------------------
# transitions


@dataclass
class _Ctx:
    """Everything a transition needs at run time."""

    dims: mc.MachineDims
    tensors: mc.OpTensors
    plan: "ExecutionPlan"
    params: dict
    batch: int

    def counter(self, index):
        return mc.onehot_counter(self.plan.width, index, self.batch)


class Transition:
    kind = "abstract"
    span = (0, 0)  # original instruction range [lo, hi)

    def apply(self, state, ctx):
        raise NotImplementedError

    def describe(self):
        return self.kind


class PrimTransition(Transition):
    def __init__(self, ins, orig_index, plan_index, plan_target=None):
        self.ins = ins
        self.kind = ins.op
        self.span = (orig_index, orig_index + 1)
        self.plan_index = plan_index
        self.plan_target = plan_target
        self.orig_return = orig_index + 1

    def apply(self, state, ctx):
        ins = self.ins
        next_c = ctx.counter(self.plan_index + 1)
        target_c = None if self.plan_target is None else ctx.counter(self.plan_target)
        ret_info = None
        if ins.op == "CALL":
            ret_info = (mc.onehot_counter(ctx.dims.v, self.orig_return, ctx.batch),
                        ctx.plan.return_map)
        elif ins.op == "RET":
            ret_info = (None, ctx.plan.return_map)
        return mc.apply_word(ins.op, ins.arg, state, ctx.tensors, next_c,
                             target_c=target_c, ret_info=ret_info)

    def describe(self):
        return self.ins.render(self.plan_index).split("\t", 1)[1].replace("\t", " ").strip()


class HaltTransition(Transition):
    kind = "HALT"

    def __init__(self, orig_index, plan_index):
        self.span = (orig_index, orig_index + 1)
        self.plan_index = plan_index

    def apply(self, state, ctx):
        return state

    def describe(self):
        return "HALT"


class SlotTransition(Transition):
    kind = "SLOT"

    def __init__(self, spec, orig_index, plan_index):
        self.spec = spec
        self.span = (orig_index, orig_index + 1)
        self.plan_index = plan_index

    def apply(self, state, ctx):
        next_c = ctx.counter(self.plan_index + 1)
        return sl.apply_slot(self.spec, ctx.params, state, ctx.tensors, next_c)

    def describe(self):
        return "SLOT %d" % self.spec.slot_id


class CollapsedTransition(Transition):
    kind = "collapsed"

    def __init__(self, sym, span, plan_index):
        self.sym = sym
        self.span = span
        self.plan_index = plan_index

    def apply(self, state, ctx):
        sym = self.sym
        ptr_cache = {"D": {0: state.d}, "R": {0: state.r}}
        memo = {}

        def ev(expr):
            return _eval_expr(expr, state, ptr_cache, memo, ctx.tensors)

        updates = {}
        if sym.dcells:
            D = state.D
            for off in sorted(sym.dcells):
                ptr = ptr_cache["D"].setdefault(off, mc.ptr_at(state.d, off))
                D = mc.write(D, ev(sym.dcells[off]), ptr)
            updates["D"] = D
        if sym.rcells:
            R = state.R
            for off in sorted(sym.rcells):
                ptr = ptr_cache["R"].setdefault(off, mc.ptr_at(state.r, off))
                R = mc.write(R, ev(sym.rcells[off]), ptr)
            updates["R"] = R
        if sym.hcells:
            H = state.H
            for addr in sorted(sym.hcells):
                ptr = np.zeros((state.batch, state.dims.l))
                ptr[:, addr] = 1.0
                H = mc.write(H, ev(sym.hcells[addr]), ptr)
            updates["H"] = H
        if sym.d_off:
            updates["d"] = mc.ptr_at(state.d, sym.d_off)
        if sym.r_off:
            updates["r"] = mc.ptr_at(state.r, sym.r_off)
        updates["c"] = ctx.counter(self.plan_index + 1)
        return state.with_(**updates)

    def describe(self):
        return "collapsed[%d..%d]" % (self.span[0], self.span[1] - 1)


class InterpIfTransition(Transition):
    kind = "interpIf"

    def __init__(self, then_parts, else_parts, span, plan_index):
        self.then_parts = then_parts
        self.else_parts = else_parts
        self.span = span
        self.plan_index = plan_index

    def apply(self, state, ctx):
        cond, d = mc.pop(state.D, state.d)
        p0 = ad.take_col(cond, 0)  # probability the condition is FALSE
        base = state.with_(d=d)
        s_then = base
        for part in self.then_parts:
            s_then = part.apply(s_then, ctx)
        s_else = base
        for part in self.else_parts:
            s_else = part.apply(s_else, ctx)
        p0v = ad.val(p0)
        p_then = ad.sub(np.ones_like(p0v), p0) if isinstance(p0, ad.Node) else 1.0 - p0v
        mixed = {}
        for field in ("D", "R", "H", "d", "r"):
            a, b = getattr(s_then, field), getattr(s_else, field)
            if a is b:
                mixed[field] = a
                continue
            if field in ("D", "R", "H"):
                mixed[field] = ad.add(ad.block_row_scale(a, p_then),
                                      ad.block_row_scale(b, p0))
            else:
                mixed[field] = ad.add(ad.scale_rows(a, p_then), ad.scale_rows(b, p0))
        mixed["c"] = ctx.counter(self.plan_index + 1)
        return state.with_(**mixed)

    def describe(self):
        return "interpIf[%d..%d]" % (self.span[0], self.span[1] - 1)


# ---------------------------------------------------------------------------
# plan construction


@dataclass
class ExecutionPlan:
    transitions: tuple
    program: object
    return_map: np.ndarray  # (original p) x (plan width) boundary matrix
    entry: int  # plan index
    halt_index: int  # plan index
    source_map: tuple  # per transition: original (lo, hi)

    @property
    def width(self):
        return len(self.transitions)

    def dump(self):
        lines = []
        for i, t in enumerate(self.transitions):
            lines.append("%d\t%s\t%d..%d" % (i, t.describe(), t.span[0], t.span[1] - 1))
        return "\n".join(lines) + "\n"


def _branch_targets(program):
    targets = {program.entry}
    for ins in program.instructions:
        if ins.op in ("BRANCH", "BRANCH0", "CALL"):
            targets.add(ins.arg)
    for i, ins in enumerate(program.instructions):
        if ins.op in ("BRANCH", "BRANCH0", "CALL", "RET", "SLOT"):
            targets.add(i + 1)  # fall-through / return joins
    return targets


def _eligible_region(program, region):
    for i in range(region.branch0 + 1, region.join):
        op = program.instructions[i].op
        if op in ("CALL", "RET", "SLOT", "HALT", "BRANCH0"):
            return False
        if op == "BRANCH" and not (region.has_else and i == region.then_end):
            return False
    # any jump into the region from elsewhere makes it a non-leaf construct
    own = {region.then_start, region.else_start, region.join}
    for ins in program.instructions:
        if ins.op in ("BRANCH", "BRANCH0", "CALL"):
            if region.branch0 < ins.arg < region.join and ins.arg not in own:
                return False
    return True


def _segment(program, lo, hi, collapse, emit):
    """Emit transitions for instruction range [lo, hi) of straight-line code."""
    if not collapse:
        for i in range(lo, hi):
            emit(("prim", i))
        return
    i = lo
    while i < hi:
        sym = _Symbolic()
        j = i
        while j < hi and sym.feed(program.instructions[j]):
            j += 1
        if j == i:  # uncollapsible here (dynamic heap address)
            emit(("prim", i))
            i += 1
        elif j - i == 1:
            emit(("prim", i))
            i = j
        else:
            emit(("collapsed", sym, (i, j)))
            i = j


def build_plan(program, collapse=False, interp=False):
    """Lower a program into an ExecutionPlan.

    collapse=False, interp=False gives the naive plan: one transition
    per instruction, plan indices equal to instruction indices.
    """
    p = program.length
    targets = _branch_targets(program)
    regions = {r.branch0: r for r in program.if_regions if interp and _eligible_region(program, r)}

    # cut points: branch targets and control instructions stop a segment
    pending = []  # ("prim", i) | ("collapsed", sym, span) | ("interp", region)

    def emit(item):
        pending.append(item)

    i = 0
    while i < p:
        ins = program.instructions[i]
        if i in regions:
            emit(("interp", regions[i]))
            i = regions[i].join
            continue
        if ins.op in ("BRANCH", "BRANCH0", "CALL", "RET", "HALT"):
            emit(("prim", i))
            i += 1
            continue
        if ins.op == "SLOT":
            emit(("slot", i))
            i += 1
            continue
        # straight-line chunk up to the next control word, cut at jump targets
        j = i
        while j < p and program.instructions[j].op in _SIMPLE_OPS:
            j += 1
        lo = i
        while lo < j:
            hi = min((t for t in targets if lo < t < j), default=j)
            _segment(program, lo, hi, collapse, emit)
            lo = hi
        i = j

    # map original boundaries to plan indices
    plan_of_orig = {}
    for idx, item in enumerate(pending):
        if item[0] in ("prim", "slot"):
            plan_of_orig[item[1]] = idx
        elif item[0] == "collapsed":
            plan_of_orig[item[2][0]] = idx
        else:
            plan_of_orig[item[1].branch0] = idx

    def plan_target(orig):
        if orig not in plan_of_orig:
            raise ForthError("jump target %d is not a plan boundary" % orig)
        return plan_of_orig[orig]

    transitions = []
    for idx, item in enumerate(pending):
        if item[0] == "prim":
            orig = item[1]
            ins = program.instructions[orig]
            if ins.op == "HALT":
                transitions.append(HaltTransition(orig, idx))
            elif ins.op in ("BRANCH", "BRANCH0", "CALL"):
                transitions.append(PrimTransition(ins, orig, idx, plan_target(ins.arg)))
            else:
                transitions.append(PrimTransition(ins, orig, idx))
        elif item[0] == "slot":
            orig = item[1]
            spec = program.slots[program.instructions[orig].arg]
            transitions.append(SlotTransition(spec, orig, idx))
        elif item[0] == "collapsed":
            _, sym, span = item
            transitions.append(CollapsedTransition(sym, span, idx))
        else:
            region = item[1]
            then_parts = _compile_body(program, region.then_start, region.then_end,
                                       collapse)
            else_parts = _compile_body(program, region.else_start, region.else_end,
                                       collapse)
            transitions.append(InterpIfTransition(then_parts, else_parts,
                                                  (region.branch0, region.join), idx))

    width = len(transitions)
    return_map = np.zeros((p, width))
    for orig, plan_idx in plan_of_orig.items():
        return_map[orig, plan_idx] = 1.0

    halt_index = width - 1
    plan = ExecutionPlan(
        transitions=tuple(transitions),
        program=program,
        return_map=return_map,
        entry=plan_target(program.entry),
        halt_index=halt_index,
        source_map=tuple(t.span for t in transitions),
    )
    if not isinstance(plan.transitions[halt_index], HaltTransition):
        raise ForthError("plan does not end in HALT")
    return plan


def _compile_body(program, lo, hi, collapse):
    parts = []

    def emit(item):
        if item[0] == "prim":
            ins = program.instructions[item[1]]
            parts.append(PrimTransition(ins, item[1], 0))
        else:
            _, sym, span = item
            parts.append(CollapsedTransition(sym, span, 0))

    _segment(program, lo, hi, collapse, emit)
    return parts


def make_context(plan, dims, params=None, batch=1):
    program = plan.program
    program.check_continuous(dims)
    return _Ctx(dims=dims, tensors=mc.OpTensors(dims.v), plan=plan,
                params=params or {}, batch=batch)


# ---------------------------------------------------------------------------
# the execution RNN


def rnn_step(state, plan, ctx, floor=0.0):
    """S' = sum_i c_i w_i(S) over transitions with attention above floor."""
    cvals = ad.val(state.c)
    support = np.nonzero(np.abs(cvals).max(axis=0) > floor)[0]
    if support.size == 0:
        raise RuntimeFault("program counter lost all mass")

    if (support.size == 1 and isinstance(state.c, np.ndarray)
            and np.all(cvals[:, support[0]] == 1.0)):
        return plan.transitions[support[0]].apply(state, ctx)

    outs = [plan.transitions[i].apply(state, ctx) for i in support]
    weights = [ad.take_col(state.c, i) for i in support]
    mixed = {}
    for field in ("D", "R", "H", "d", "r", "c"):
        parts = [getattr(o, field) for o in outs]
        if field != "c" and all(p is parts[0] for p in parts):
            mixed[field] = parts[0]
            continue
        total = None
        for part, w in zip(parts, weights):
            term = ad.block_row_scale(part, w) if field in ("D", "R", "H") \
                else ad.scale_rows(part, w)
            total = term if total is None else ad.add(total, term)
        mixed[field] = total
    return state.with_(**mixed)


def discretize(state):
    """Round every distribution to the one-hot at its argmax (ties: lowest)."""
    vals = state.values()

    def onehot_rows(m):
        out = np.zeros_like(m)
        out[np.arange(m.shape[0]), m.argmax(axis=1)] = 1.0
        return out

    return state.with_(**{k: onehot_rows(v) for k, v in vals.items()})


def run(state, plan, ctx, steps, record_counter=False, record_states=False,
        discretize_each=False, stop_on_halt=None, floor=0.0):
    """Apply rnn_step a fixed number of times (HALT self-loops are harmless).

    Returns (final state, counter trace, state snapshots); the traces
    are empty unless their record flags are set.
    """
    trace = []
    states = []
    current = state
    for step in range(steps):
        current = rnn_step(current, plan, ctx, floor=floor)
        cvals = ad.val(current.c)
        if not np.all(np.isfinite(cvals)):
            raise RuntimeFault("non-finite program counter", step)
        if discretize_each:
            current = discretize(current)
            cvals = ad.val(current.c)
        if record_counter:
            trace.append(np.array(cvals, copy=True))
        if record_states:
            states.append(mc.snapshot_ints(current))
        if stop_on_halt is not None:
            if np.all(cvals[:, plan.halt_index] >= stop_on_halt):
                break
    return current, trace, states


def write_counter_trace(trace, path, batch_index=0):
    """CSV, one row per step, one column per plan position."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        width = trace[0].shape[1] if trace else 0
        writer.writerow(["step"] + ["c%d" % i for i in range(width)])
        for step, row in enumerate(trace):
            writer.writerow([step] + ["%.6g" % x for x in row[batch_index]])


def write_state_trace(states, path, batch_index=0):
    """Debug CSV per step: stack values, pointer tops, counter position."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stack", "d", "rstack", "r", "pc"])
        for step, snap in enumerate(states):
            s = snap[batch_index]
            writer.writerow([step, " ".join(map(str, s["stack"])), len(s["stack"]),
                             " ".join(map(str, s["rstack"])), len(s["rstack"]),
                             s["pc"]])
