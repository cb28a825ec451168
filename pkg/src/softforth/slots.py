"""Trainable slots: `{ encoder -> decoder }` parsing, parameters, execution.

A slot is a learned state transition. The encoder chain maps the
machine state to a latent vector h (observe/static/linear/sigmoid/tanh
stages); the decoder projects h and turns it into a state update:

  choose w1..wm      softmax-weighted mixture of the m candidate words
  manipulate e1..em  softmaxed rows written over the referenced cells
  permute e1..em     softmax mixture over all m! permutations of the
                     referenced values

Decoders always own a projection (weights + bias) from the encoder
output to their arity, so `linear 10 -> choose 0 1` is well-formed.
"""

import itertools
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import machine as mc
from .errors import ForthError, ParseError

PERMUTE_REF_CAP = 4  # m! blows up fast; m <= 4 covers every in-scope sketch

_REF_RE = re.compile(r"^([DRH])(-?\d+)$")

# words a choose decoder may name (plus literals 0..v-1 and NOP)
_CHOOSE_WORDS = {
    "1+", "1-", "DUP", "SWAP", "OVER", "DROP", "+", "-", "*", "/",
    ">", "<", "=", ">R", "R>", "@R", "@", "!", "NOP",
}


@dataclass(frozen=True)
class StackRef:
    """A machine-state element: D/R at a relative depth, or a heap address."""

    area: str  # "D", "R" or "H"
    index: int

    def __str__(self):
        return "%s%d" % (self.area, self.index)


@dataclass(frozen=True)
class SlotSpec:
    stages: tuple  # encoder stages, e.g. (("observe", refs), ("tanh",), ("linear", 70))
    decoder: tuple  # ("choose", words) | ("manipulate", refs) | ("permute", refs)
    slot_id: int
    text: str

    def describe(self):
        return self.text


def _parse_ref(tok, line):
    m = _REF_RE.match(tok)
    if not m:
        raise ParseError("bad state reference %r" % tok, line)
    area, idx = m.group(1), int(m.group(2))
    if area in ("D", "R") and idx > 0:
        raise ParseError("stack reference %r must have index <= 0" % tok, line)
    if area == "H" and idx < 0:
        raise ParseError("heap reference %r must have index >= 0" % tok, line)
    return StackRef(area, idx)


def _parse_choose_word(tok, line):
    if tok.isdigit():
        return ("LIT", int(tok))
    if tok in _CHOOSE_WORDS:
        return (tok, None)
    raise ParseError("%r is not a primitive word usable in choose" % tok, line)


def parse_slot(body: str, slot_id: int = 0, line: int = 0) -> SlotSpec:
    """Parse the text between `{` and `}` into a validated SlotSpec."""
    parts = [p.strip() for p in body.split("->")]
    if len(parts) < 2:
        raise ParseError("slot needs at least 'encoder -> decoder'", line)
    head = parts[-1].split()
    if not head:
        raise ParseError("decoder missing", line)
    kind, args = head[0], head[1:]
    if kind == "choose":
        if not args:
            raise ParseError("choose needs at least one word", line)
        decoder = ("choose", tuple(_parse_choose_word(w, line) for w in args))
    elif kind in ("manipulate", "permute"):
        refs = tuple(_parse_ref(r, line) for r in args)
        if not refs:
            raise ParseError("%s needs at least one reference" % kind, line)
        if len(set(refs)) != len(refs):
            raise ParseError("%s references must be distinct" % kind, line)
        if kind == "permute" and len(refs) > PERMUTE_REF_CAP:
            raise ParseError("permute over %d refs exceeds cap %d"
                             % (len(refs), PERMUTE_REF_CAP), line)
        decoder = (kind, refs)
    else:
        raise ParseError("unknown decoder %r" % kind, line)

    stages = []
    for pos, part in enumerate(parts[:-1]):
        words = part.split()
        if not words:
            raise ParseError("empty encoder stage", line)
        name = words[0]
        if name == "observe":
            refs = tuple(_parse_ref(r, line) for r in words[1:])
            if not refs:
                raise ParseError("observe needs references", line)
            stages.append(("observe", refs))
        elif name == "static":
            stages.append(("static",))
        elif name == "linear":
            if len(words) != 2 or not words[1].isdigit():
                raise ParseError("linear needs a size, e.g. 'linear 70'", line)
            stages.append(("linear", int(words[1])))
        elif name in ("sigmoid", "tanh"):
            stages.append((name,))
        else:
            raise ParseError("unknown encoder stage %r" % name, line)
        if pos == 0 and stages[0][0] not in ("observe", "static"):
            raise ParseError("encoder must start with observe or static", line)
        if pos > 0 and stages[-1][0] in ("observe", "static"):
            raise ParseError("%s only allowed as the first stage" % stages[-1][0], line)
    return SlotSpec(stages=tuple(stages), decoder=decoder, slot_id=slot_id, text=body)


# ---------------------------------------------------------------------------
# parameters


def _stage_dims(spec, dims):
    """Encoder stage output widths, starting width, decoder arity."""
    widths = []
    width = None
    for stage in spec.stages:
        if stage[0] == "observe":
            width = len(stage[1]) * dims.v
        elif stage[0] == "static":
            width = dims.v
        elif stage[0] == "linear":
            width = stage[1]
        widths.append(width)
    kind, args = spec.decoder
    if kind == "choose":
        arity = len(args)
    elif kind == "permute":
        arity = _factorial(len(args))
    else:
        arity = len(args) * dims.v
    return widths, arity


def _factorial(n):
    out = 1
    for i in range(2, n + 1):
        out *= i
    return out


def param_names(spec):
    names = []
    for j, stage in enumerate(spec.stages):
        if stage[0] == "linear":
            names.append("slot%d/enc%d/W" % (spec.slot_id, j))
            names.append("slot%d/enc%d/b" % (spec.slot_id, j))
        elif stage[0] == "static":
            names.append("slot%d/enc%d/const" % (spec.slot_id, j))
    names.append("slot%d/dec/W" % spec.slot_id)
    names.append("slot%d/dec/b" % spec.slot_id)
    return names


def init_params(spec, dims, rng, store=None):
    """Register this slot's parameters (Xavier weights, zero biases)."""
    if store is None:
        store = ad.ParamStore()
    widths, arity = _stage_dims(spec, dims)
    width = None
    for j, stage in enumerate(spec.stages):
        if stage[0] == "observe":
            width = widths[j]
        elif stage[0] == "static":
            store.register("slot%d/enc%d/const" % (spec.slot_id, j), np.zeros(dims.v))
            width = dims.v
        elif stage[0] == "linear":
            out = stage[1]
            store.register("slot%d/enc%d/W" % (spec.slot_id, j),
                           ad.xavier_uniform((width, out), rng))
            store.register("slot%d/enc%d/b" % (spec.slot_id, j), np.zeros(out))
            width = out
    store.register("slot%d/dec/W" % spec.slot_id, ad.xavier_uniform((width, arity), rng))
    store.register("slot%d/dec/b" % spec.slot_id, np.zeros(arity))
    return store


# ---------------------------------------------------------------------------
# execution


def _ref_pointer(ref, state):
    """Pointer distribution addressing a referenced state element."""
    if ref.area == "D":
        return mc.ptr_at(state.d, ref.index), state.D
    if ref.area == "R":
        return mc.ptr_at(state.r, ref.index), state.R
    if ref.index >= state.dims.l:
        raise ForthError("heap reference %s beyond l=%d" % (ref, state.dims.l))
    ptr = np.zeros((state.batch, state.dims.l))
    ptr[:, ref.index] = 1.0
    return ptr, state.H


def read_ref(ref, state):
    ptr, memory = _ref_pointer(ref, state)
    return mc.read(memory, ptr)


def encode_state(spec, params, state):
    """Run the encoder chain, producing the latent vector h of shape (B, n)."""
    h = None
    for j, stage in enumerate(spec.stages):
        kind = stage[0]
        if kind == "observe":
            pieces = [read_ref(ref, state) for ref in stage[1]]
            h = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=1)
        elif kind == "static":
            const = params["slot%d/enc%d/const" % (spec.slot_id, j)]
            ones = np.ones(state.batch)
            h = ad.outer(ones, const)
        elif kind == "linear":
            W = params["slot%d/enc%d/W" % (spec.slot_id, j)]
            b = params["slot%d/enc%d/b" % (spec.slot_id, j)]
            h = ad.add_rowvec(ad.matmul(h, W), b)
        elif kind == "sigmoid":
            h = ad.sigmoid(h)
        elif kind == "tanh":
            h = ad.tanh(h)
    return h


def _decoder_logits(spec, params, h):
    W = params["slot%d/dec/W" % spec.slot_id]
    b = params["slot%d/dec/b" % spec.slot_id]
    return ad.add_rowvec(ad.matmul(h, W), b)


def decode_choose(words, weights, state, tensors, next_c):
    """Weighted mixture of the candidate word transitions."""
    outs = [mc.apply_word(op, arg, state, tensors, next_c) for op, arg in words]
    mixed = {}
    for field in ("D", "R", "H", "d", "r"):
        parts = [getattr(o, field) for o in outs]
        if all(p is parts[0] for p in parts):
            mixed[field] = parts[0]
            continue
        total = None
        for i, part in enumerate(parts):
            w = ad.take_col(weights, i)
            term = ad.block_row_scale(part, w) if field in ("D", "R", "H") \
                else ad.scale_rows(part, w)
            total = term if total is None else ad.add(total, term)
        mixed[field] = total
    return state.with_(c=next_c, **mixed)


def decode_manipulate(refs, logits, state, next_c):
    """Write softmaxed projection rows over the referenced elements."""
    v = state.dims.v
    memories = {}
    for j, ref in enumerate(refs):
        row = ad.softmax(ad.slice_cols(logits, j * v, (j + 1) * v))
        ptr, _ = _ref_pointer(ref, state)
        current = memories.get(ref.area, getattr(state, ref.area))
        memories[ref.area] = mc.write(current, row, ptr)
    return state.with_(c=next_c, **memories)


def decode_permute(refs, weights, state, next_c):
    """Mix the m! value permutations of the referenced elements."""
    values = [read_ref(ref, state) for ref in refs]
    m = len(refs)
    perms = list(itertools.permutations(range(m)))  # lexicographic over refs as written
    new_values = []
    for j in range(m):
        total = None
        for k, perm in enumerate(perms):
            w = ad.take_col(weights, k)
            term = ad.scale_rows(values[perm[j]], w)
            total = term if total is None else ad.add(total, term)
        new_values.append(total)
    memories = {}
    for ref, value in zip(refs, new_values):
        ptr, _ = _ref_pointer(ref, state)
        current = memories.get(ref.area, getattr(state, ref.area))
        memories[ref.area] = mc.write(current, value, ptr)
    return state.with_(c=next_c, **memories)


def apply_slot(spec, params, state, tensors, next_c):
    """Full slot transition: encode, project, decode, advance the counter."""
    for _, refs in [s for s in spec.stages if s[0] == "observe"]:
        for ref in refs:
            if ref.area in ("D", "R") and -ref.index >= state.dims.l:
                raise ForthError("reference %s beyond stack size l=%d"
                                 % (ref, state.dims.l))
    h = encode_state(spec, params, state)
    logits = _decoder_logits(spec, params, h)
    kind, args = spec.decoder
    if kind == "choose":
        return decode_choose(args, ad.softmax(logits), state, tensors, next_c)
    if kind == "manipulate":
        return decode_manipulate(args, logits, state, next_c)
    return decode_permute(args, ad.softmax(logits), state, next_c)
