"""Lowering of tokenized source to a flat program over primitive words.

Control flow compiles away: IF/ELSE/THEN and BEGIN/WHILE/REPEAT become
BRANCH0/BRANCH, DO..LOOP keeps a countdown counter in a heap cell
allocated per loop site, `: name ... ;` definitions become labelled
blocks invoked by CALL and closed by RET. `MACRO: name ... ;` bodies
are inlined at every use, and VARIABLE / CREATE..ALLOT names get fixed
heap addresses at compile time.

Layout: [definition blocks in definition order] [main code] [HALT], so
the single HALT is always the final instruction. Each instruction
remembers its source line and source token, which drives error
messages and execution traces; a CALL carries the callee's header line.
"""

from dataclasses import dataclass

from .errors import CompileError
from .lexer import COLON, NUMBER, SEMICOLON, SLOT_BODY, WORD, Token, tokenize
from .slots import SlotSpec, parse_slot

# canonical opcode set; everything an instruction can be after lowering
OPCODES = (
    "LIT", "1+", "1-", "DUP", "SWAP", "OVER", "DROP", "+", "-", "*", "/",
    "@", "!", ">", "<", "=", ">R", "R>", "@R",
    "BRANCH", "BRANCH0", "CALL", "RET", "HALT", "SLOT",
)

# simple words that lower 1:1 (R@ is the Table-4 spelling @R)
_PLAIN_WORDS = {
    "1+": "1+", "1-": "1-", "DUP": "DUP", "SWAP": "SWAP", "OVER": "OVER",
    "DROP": "DROP", "+": "+", "-": "-", "*": "*", "/": "/",
    "@": "@", "!": "!", ">": ">", "<": "<", "=": "=",
    ">R": ">R", "R>": "R>", "@R": "@R", "R@": "@R",
}

_CONTROL_WORDS = {
    "IF", "ELSE", "THEN", "BEGIN", "WHILE", "REPEAT", "DO", "LOOP",
    "VARIABLE", "CREATE", "ALLOT", "MACRO:",
}

_MAX_MACRO_DEPTH = 16


@dataclass(frozen=True)
class Instr:
    op: str
    arg: object = None  # literal value, branch target, or slot id
    line: int = 0  # 0-based source line (CALL: callee header line)
    word: int = -1  # source token ordinal, for word-boundary traces

    def render(self, idx):
        arg = "" if self.arg is None else str(self.arg)
        return "%d\t%s\t%s" % (idx, self.op, arg)


@dataclass(frozen=True)
class IfRegion:
    branch0: int
    then_start: int
    then_end: int  # exclusive; equals the structural BRANCH slot when has_else
    else_start: int
    else_end: int  # exclusive
    join: int
    has_else: bool


@dataclass
class LoweredProgram:
    instructions: tuple
    labels: dict
    entry: int
    slots: tuple
    if_regions: tuple
    heap_top: int
    source: str = ""

    @property
    def length(self):
        return len(self.instructions)

    def dump(self):
        """One instruction per line: idx<TAB>opcode<TAB>arg."""
        return "\n".join(ins.render(i) for i, ins in enumerate(self.instructions)) + "\n"

    def validate(self, dims):
        """Check literals and heap use against machine dims."""
        problems = []
        for i, ins in enumerate(self.instructions):
            if ins.op == "LIT" and not (0 <= ins.arg < dims.v):
                problems.append("literal %d at %d outside [0, %d)" % (ins.arg, i, dims.v))
        if self.heap_top > dims.v:
            problems.append("heap needs %d cells, value size is %d" % (self.heap_top, dims.v))
        if problems:
            raise CompileError("; ".join(problems))

    def check_continuous(self, dims):
        """Extra constraints for the soft machine."""
        self.validate(dims)
        if self.length > dims.v:
            raise CompileError(
                "program length %d exceeds value size %d; return addresses "
                "cannot be encoded" % (self.length, dims.v))
        if self.heap_top > dims.l:
            raise CompileError(
                "heap needs %d cells, stack size is %d" % (self.heap_top, dims.l))


class _Block:
    """One compilation unit (a definition body or the main code)."""

    def __init__(self, name):
        self.name = name
        self.code = []  # mutable [op, arg, line, word]
        self.ctl = []  # control-structure stack
        self.regions = []  # local IfRegion tuples

    def emit(self, op, arg, tok):
        self.code.append([op, arg, tok.line, tok_ordinal(tok)])
        return len(self.code) - 1


_TOK_ORDINALS = {}


def tok_ordinal(tok):
    """Stable per-compile ordinal of a token object."""
    return _TOK_ORDINALS.setdefault(id(tok), len(_TOK_ORDINALS))


class _Stream:
    """Token cursor with macro-expansion pushback."""

    def __init__(self, tokens):
        self.stack = list(reversed(tokens))
        self.macro_names = []

    def __bool__(self):
        return bool(self.stack)

    def next(self, expect=None, what="token"):
        while self.stack:
            tok = self.stack.pop()
            if isinstance(tok, tuple):  # macro-end marker
                self.macro_names.pop()
                continue
            if expect is not None and tok.kind != expect:
                raise CompileError("expected %s, got %r" % (what, tok.text), tok.line)
            return tok
        raise CompileError("unexpected end of input (missing %s)" % what)

    def push_macro(self, name, tokens, line):
        if name in self.macro_names:
            raise CompileError("recursive macro %r" % name, line)
        if len(self.macro_names) >= _MAX_MACRO_DEPTH:
            raise CompileError("macro expansion deeper than %d" % _MAX_MACRO_DEPTH, line)
        self.macro_names.append(name)
        self.stack.append(("endmacro", name))
        for tok in reversed(tokens):
            self.stack.append(tok)


def compile_tokens(tokens, source=""):
    """Lower a token stream to a LoweredProgram."""
    _TOK_ORDINALS.clear()
    stream = _Stream(tokens)
    definitions = []  # ordered _Blocks
    def_lines = {}
    macros = {}
    variables = {}
    heap_top = 0
    slots = []
    main = _Block("__main__")
    current = main
    defined = set()

    def block_of(name):
        for blk in definitions:
            if blk.name == name:
                return blk
        raise CompileError("internal: missing block %r" % name)

    while stream:
        tok = stream.next()
        text, kind = tok.text, tok.kind

        if kind == COLON:
            if current is not main:
                raise CompileError("':' inside a definition", tok.line)
            name_tok = stream.next(WORD, "definition name")
            name = name_tok.text
            if name in defined or name in macros or name in variables:
                raise CompileError("redefinition of %r" % name, name_tok.line)
            blk = _Block(name)
            definitions.append(blk)
            def_lines[name] = tok.line
            defined.add(name)
            current = blk
            continue

        if kind == SEMICOLON:
            if current is main:
                raise CompileError("';' outside a definition", tok.line)
            if current.ctl:
                raise CompileError("unbalanced control structure in %r" % current.name,
                                   tok.line)
            current.emit("RET", None, tok)
            current = main
            continue

        if kind == NUMBER:
            current.emit("LIT", int(text), tok)
            continue

        if kind == SLOT_BODY:
            spec = parse_slot(text, slot_id=len(slots), line=tok.line)
            slots.append(spec)
            current.emit("SLOT", spec.slot_id, tok)
            continue

        # words ------------------------------------------------------------
        if text in _PLAIN_WORDS:
            current.emit(_PLAIN_WORDS[text], None, tok)
            continue

        if text == "IF":
            idx = current.emit("BRANCH0", None, tok)
            current.ctl.append(("if", idx))
            continue

        if text == "ELSE":
            if not current.ctl or current.ctl[-1][0] != "if":
                raise CompileError("ELSE without IF", tok.line)
            _, b0 = current.ctl.pop()
            idx = current.emit("BRANCH", None, tok)
            current.code[b0][1] = idx + 1
            current.ctl.append(("else", b0, idx))
            continue

        if text == "THEN":
            if not current.ctl or current.ctl[-1][0] not in ("if", "else"):
                raise CompileError("THEN without IF", tok.line)
            top = current.ctl.pop()
            here = len(current.code)
            if top[0] == "if":
                b0 = top[1]
                current.code[b0][1] = here
                current.regions.append(IfRegion(b0, b0 + 1, here, here, here, here, False))
            else:
                _, b0, br = top
                current.code[br][1] = here
                current.regions.append(IfRegion(b0, b0 + 1, br, br + 1, here, here, True))
            continue

        if text == "BEGIN":
            current.ctl.append(("begin", len(current.code)))
            continue

        if text == "WHILE":
            if not current.ctl or current.ctl[-1][0] != "begin":
                raise CompileError("WHILE without BEGIN", tok.line)
            idx = current.emit("BRANCH0", None, tok)
            begin = current.ctl.pop()[1]
            current.ctl.append(("while", begin, idx))
            continue

        if text == "REPEAT":
            if not current.ctl or current.ctl[-1][0] != "while":
                raise CompileError("REPEAT without BEGIN..WHILE", tok.line)
            _, begin, b0 = current.ctl.pop()
            current.emit("BRANCH", begin, tok)
            current.code[b0][1] = len(current.code)
            continue

        if text == "DO":
            cell = heap_top
            heap_top += 1
            # count = limit - index, stored in the loop cell; test-first loop
            current.emit("-", None, tok)
            current.emit("LIT", cell, tok)
            current.emit("!", None, tok)
            check = len(current.code)
            current.emit("LIT", cell, tok)
            current.emit("@", None, tok)
            exit_b0 = current.emit("BRANCH0", None, tok)
            current.ctl.append(("do", cell, check, exit_b0))
            continue

        if text == "LOOP":
            if not current.ctl or current.ctl[-1][0] != "do":
                raise CompileError("LOOP without DO", tok.line)
            _, cell, check, exit_b0 = current.ctl.pop()
            current.emit("LIT", cell, tok)
            current.emit("@", None, tok)
            current.emit("1-", None, tok)
            current.emit("LIT", cell, tok)
            current.emit("!", None, tok)
            current.emit("BRANCH", check, tok)
            current.code[exit_b0][1] = len(current.code)
            continue

        if text == "VARIABLE":
            if current is not main:
                raise CompileError("VARIABLE only allowed at top level", tok.line)
            name_tok = stream.next(WORD, "variable name")
            if name_tok.text in variables or name_tok.text in defined:
                raise CompileError("redefinition of %r" % name_tok.text, name_tok.line)
            variables[name_tok.text] = heap_top
            heap_top += 1
            continue

        if text == "CREATE":
            if current is not main:
                raise CompileError("CREATE only allowed at top level", tok.line)
            name_tok = stream.next(WORD, "buffer name")
            count_tok = stream.next(NUMBER, "cell count")
            allot_tok = stream.next(WORD, "ALLOT")
            if allot_tok.text != "ALLOT":
                raise CompileError("CREATE requires '<name> <n> ALLOT'", allot_tok.line)
            if name_tok.text in variables or name_tok.text in defined:
                raise CompileError("redefinition of %r" % name_tok.text, name_tok.line)
            variables[name_tok.text] = heap_top
            heap_top += int(count_tok.text)
            continue

        if text == "ALLOT":
            raise CompileError("ALLOT outside CREATE '<name> <n> ALLOT'", tok.line)

        if text == "MACRO:":
            name_tok = stream.next(WORD, "macro name")
            body = []
            while True:
                t = stream.next(what="';' closing macro %r" % name_tok.text)
                if t.kind == SEMICOLON:
                    break
                if t.kind == COLON:
                    raise CompileError("':' inside a macro body", t.line)
                body.append(t)
            macros[name_tok.text] = body
            continue

        if text in macros:
            stream.push_macro(text, macros[text], tok.line)
            continue

        if text in variables:
            current.emit("LIT", variables[text], tok)
            continue

        if text in defined or text == current.name:
            current.emit("CALL", ("name", text), tok)
            continue

        raise CompileError("undefined word %r" % text, tok.line)

    if current is not main:
        raise CompileError("unterminated definition %r" % current.name)
    if main.ctl:
        raise CompileError("unbalanced control structure")

    # link: definition blocks, then main, then the terminal HALT
    offsets = {}
    cursor = 0
    for blk in definitions:
        offsets[blk.name] = cursor
        cursor += len(blk.code)
    offsets["__main__"] = cursor
    entry = cursor
    cursor += len(main.code)

    instructions = []
    regions = []
    for blk in definitions + [main]:
        base = offsets[blk.name]
        for op, arg, line, word in blk.code:
            if op in ("BRANCH", "BRANCH0"):
                if arg is None:
                    raise CompileError("unresolved branch in %r" % blk.name)
                arg = arg + base
            elif op == "CALL":
                target = arg[1]
                if target not in offsets:
                    raise CompileError("undefined word %r" % target)
                arg = offsets[target]
                line = def_lines[target]  # traces report the callee header
            instructions.append(Instr(op, arg, line, word))
        for reg in blk.regions:
            regions.append(IfRegion(
                reg.branch0 + base, reg.then_start + base, reg.then_end + base,
                reg.else_start + base, reg.else_end + base, reg.join + base,
                reg.has_else))
    last_line = instructions[-1].line if instructions else 0
    instructions.append(Instr("HALT", None, last_line, -1))

    program = LoweredProgram(
        instructions=tuple(instructions),
        labels=dict(offsets),
        entry=entry,
        slots=tuple(slots),
        if_regions=tuple(regions),
        heap_top=heap_top,
        source=source,
    )
    _check_targets(program)
    return program


def _check_targets(program):
    p = program.length
    for i, ins in enumerate(program.instructions):
        if ins.op in ("BRANCH", "BRANCH0", "CALL"):
            if not (0 <= ins.arg < p):
                raise CompileError("branch target %r out of range at %d" % (ins.arg, i))


def compile_source(source: str) -> LoweredProgram:
    return compile_tokens(tokenize(source), source=source)
