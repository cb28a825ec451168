"""Exact discrete semantics for lowered programs.

This is the ground-truth oracle the continuous machine is checked
against. All arithmetic wraps mod v (matching the circular operation
tensors of the soft machine); TRUE/FALSE are 1/0 and BRANCH0 jumps on
a popped 0. Stacks fault on underflow and on growth beyond l.
"""

from dataclasses import dataclass

from .errors import RuntimeFault, StepBudgetExceeded


@dataclass(frozen=True)
class DiscreteState:
    """Immutable snapshot: data stack, return stack, heap, program counter."""

    D: tuple
    R: tuple
    H: tuple
    c: int

    def stacks(self):
        return list(self.D), list(self.R)


def initial_state(program, dims, data=(), rstack=(), heap=None):
    h = [0] * dims.v
    for addr, value in (heap or {}).items():
        h[addr] = value % dims.v
    return DiscreteState(
        D=tuple(x % dims.v for x in data),
        R=tuple(x % dims.v for x in rstack),
        H=tuple(h),
        c=program.entry,
    )


def _binary_arith(op, a, b, v, index):
    if op == "+":
        return (a + b) % v
    if op == "-":
        return (a - b) % v
    if op == "*":
        return (a * b) % v
    if op == "/":
        return 0 if b == 0 else (a // b) % v
    if op == ">":
        return 1 if a > b else 0
    if op == "<":
        return 1 if a < b else 0
    if op == "=":
        return 1 if a == b else 0
    raise RuntimeFault("unknown operator %r" % op, index)


def step_discrete(state, program, dims):
    """One transition; pure, returns the successor state."""
    i = state.c
    if not (0 <= i < program.length):
        raise RuntimeFault("program counter %d out of range" % i, i)
    ins = program.instructions[i]
    op = ins.op
    if op == "HALT":
        raise RuntimeFault("step on a halted machine", i)

    D, R = list(state.D), list(state.R)
    H = list(state.H)
    l, v = dims.l, dims.v
    c = i + 1

    def pop(stack, what):
        if not stack:
            raise RuntimeFault("%s underflow" % what, i)
        return stack.pop()

    def push(stack, x, what):
        if len(stack) >= l:
            raise RuntimeFault("%s overflow beyond depth %d" % (what, l), i)
        stack.append(x % v)

    if op == "LIT":
        push(D, ins.arg, "data stack")
    elif op == "1+":
        push(D, pop(D, "data stack") + 1, "data stack")
    elif op == "1-":
        push(D, pop(D, "data stack") - 1, "data stack")
    elif op == "DUP":
        x = pop(D, "data stack")
        D.append(x)
        push(D, x, "data stack")
    elif op == "SWAP":
        b, a = pop(D, "data stack"), pop(D, "data stack")
        D.extend((b, a))
    elif op == "OVER":
        b, a = pop(D, "data stack"), pop(D, "data stack")
        D.extend((a, b))
        push(D, a, "data stack")
    elif op == "DROP":
        pop(D, "data stack")
    elif op in ("+", "-", "*", "/", ">", "<", "="):
        b, a = pop(D, "data stack"), pop(D, "data stack")
        push(D, _binary_arith(op, a, b, v, i), "data stack")
    elif op == "@":
        addr = pop(D, "data stack")
        if addr >= v:
            raise RuntimeFault("heap address %d out of range" % addr, i)
        push(D, H[addr], "data stack")
    elif op == "!":
        addr = pop(D, "data stack")
        x = pop(D, "data stack")
        if addr >= v:
            raise RuntimeFault("heap address %d out of range" % addr, i)
        H[addr] = x
    elif op == ">R":
        push(R, pop(D, "data stack"), "return stack")
    elif op == "R>":
        push(D, pop(R, "return stack"), "data stack")
    elif op == "@R":
        if not R:
            raise RuntimeFault("return stack underflow", i)
        push(D, R[-1], "data stack")
    elif op == "BRANCH":
        c = ins.arg
    elif op == "BRANCH0":
        c = ins.arg if pop(D, "data stack") == 0 else i + 1
    elif op == "CALL":
        push(R, i + 1, "return stack")
        c = ins.arg
    elif op == "RET":
        c = pop(R, "return stack")
    elif op == "SLOT":
        raise RuntimeFault("slot %d has no discrete semantics" % ins.arg, i)
    else:
        raise RuntimeFault("unknown opcode %r" % op, i)

    return DiscreteState(D=tuple(D), R=tuple(R), H=tuple(H), c=c)


def run_discrete(state, program, dims, max_steps=100_000):
    """Iterate step_discrete until HALT; returns (final state, step count)."""
    if max_steps <= 0:
        raise StepBudgetExceeded("max_steps must be positive")
    current = state
    for steps in range(max_steps + 1):
        ins = program.instructions[current.c]
        if ins.op == "HALT":
            return current, steps
        current = step_discrete(current, program, dims)
    raise StepBudgetExceeded("no HALT within %d steps" % max_steps)


def run_source_stack(program, dims, data=(), max_steps=100_000):
    """Convenience: run from an initial data stack, return the final one."""
    final, _ = run_discrete(initial_state(program, dims, data=data),
                            program, dims, max_steps)
    return list(final.D)
