"""Tokenizer for .d4 source text.

Comments come in two forms: `( ... )` runs to the matching paren and
`\\ ...` runs to end of line. Both are dropped here. A slot body
`{ ... }` is captured as a single token so the compiler can hand it to
the slot parser verbatim.
"""

from dataclasses import dataclass

from .errors import ParseError

# Token kinds. COMMENT and SLOT_OPEN exist for completeness; the
# tokenizer strips comments and folds `{ ... }` into one SLOT_BODY.
WORD = "word"
NUMBER = "number"
COLON = "colon-def-start"
SEMICOLON = "colon-def-end"
SLOT_OPEN = "slot-open"
SLOT_BODY = "slot-body"
COMMENT = "comment"

_WS = " \t\r\n"


@dataclass(frozen=True)
class Token:
    text: str
    kind: str
    line: int  # 0-based source line


def _classify(text):
    if text == ":":
        return COLON
    if text == ";":
        return SEMICOLON
    if text.isdigit():
        return NUMBER
    return WORD


def tokenize(source: str) -> list[Token]:
    """Split source into tokens, dropping comments and folding slots."""
    tokens = []
    i, n = 0, len(source)
    line = 0
    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            i += 1
            continue
        if ch in _WS:
            i += 1
            continue
        if ch == "\\":
            j = source.find("\n", i)
            i = n if j < 0 else j  # newline handled above
            continue
        if ch == "(":
            start_line = line
            j = source.find(")", i)
            if j < 0:
                raise ParseError("unterminated comment '('", start_line)
            line += source.count("\n", i, j)
            i = j + 1
            continue
        if ch == "{":
            start_line = line
            j = source.find("}", i)
            if j < 0:
                raise ParseError("unterminated slot brace '{'", start_line)
            body = source[i + 1 : j].strip()
            tokens.append(Token(body, SLOT_BODY, start_line))
            line += source.count("\n", i, j)
            i = j + 1
            continue
        j = i
        while j < n and source[j] not in _WS:
            j += 1
        text = source[i:j]
        tokens.append(Token(text, _classify(text), line))
        i = j
    return tokens
