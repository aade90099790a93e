"""Tokenizer and recursive-descent parser for reward programs.

The grammar is documented in ``docs/reward_grammar.md``. Parsing validates
indices against the declared dims and checks widths, so every returned
program can be evaluated without further checks.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

from ._exceptions import RewardSyntaxError
from ._reward_ast import (
    DEFAULT_HIGH,
    DEFAULT_LOW,
    IMPLICIT_STAGE,
    REDUCTIONS,
    UNARY_FUNCTIONS,
    Binary,
    ChunkRef,
    Const,
    Dot,
    GripRef,
    Index,
    KeypointRef,
    Node,
    Norm,
    Power,
    Reduce,
    RewardDims,
    RewardProgram,
    Selector,
    Stage,
    Unary,
    reduction_range,
    selector_width,
)

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<newline>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<punct>[()\[\]{}:;,+\-*/^=])
    """,
    re.VERBOSE,
)

_HEADER_RE = re.compile(r"^\s*dims\s+T\s*=\s*(\d+)\s+D\s*=\s*(\d+)\s+n\s*=\s*(\d+)\s*$")

_KEYWORDS = frozenset(
    {"stage", "reward", "high", "low", "description", "a", "cum", "p", "grip_start", "t", "T",
     "norm2", "dot", *UNARY_FUNCTIONS, *REDUCTIONS}
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise RewardSyntaxError(f"Unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup or ""
        if kind == "newline":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, dims: RewardDims) -> None:
        self._tokens = tokenize(text)
        self._pos = 0
        self._dims = dims
        # Stack of enclosing reductions; non-empty means ``t`` is bound.
        self._reductions = 0

    # -- token helpers ------------------------------------------------------

    @property
    def _tok(self) -> Token:
        return self._tokens[self._pos]

    def _error(self, message: str, tok: Token | None = None) -> RewardSyntaxError:
        tok = tok or self._tok
        return RewardSyntaxError(message, tok.line, tok.column)

    def _at(self, text: str) -> bool:
        tok = self._tok
        return tok.kind in ("punct", "ident") and tok.text == text

    def _advance(self) -> Token:
        tok = self._tok
        self._pos += 1
        return tok

    def _expect(self, text: str) -> Token:
        if not self._at(text):
            found = self._tok.text or "end of input"
            raise self._error(f"Expected {text!r}, found {found!r}")
        return self._advance()

    def _int(self) -> int:
        tok = self._tok
        if tok.kind != "number" or not tok.text.isdigit():
            raise self._error(f"Expected an integer, found {tok.text or 'end of input'!r}")
        self._advance()
        return int(tok.text)

    def _signed_number(self) -> float:
        sign = 1.0
        if self._at("-"):
            self._advance()
            sign = -1.0
        tok = self._tok
        if tok.kind != "number":
            raise self._error(f"Expected a numeric constant, found {tok.text or 'end of input'!r}")
        self._advance()
        return sign * float(tok.text)

    # -- program ------------------------------------------------------------

    def program(self) -> RewardProgram:
        stages: list[Stage] = []
        if self._at("reward"):
            start = self._tok
            self._advance()
            self._expect(":")
            expr = self._scalar_expr(start)
            if self._at(";"):
                self._advance()
            stages.append(Stage(IMPLICIT_STAGE, expr, DEFAULT_HIGH, DEFAULT_LOW))
        else:
            while self._at("stage"):
                stages.append(self._stage())
            if not stages:
                raise self._error("Expected 'stage' or 'reward'")
        if self._tok.kind != "eof":
            raise self._error(f"Unexpected {self._tok.text!r} after program")
        names = [s.name for s in stages]
        for i, name in enumerate(names):
            if name in names[:i]:
                raise RewardSyntaxError(f"Duplicate stage name {name!r}", 1, 1)
        return RewardProgram(stages=tuple(stages), dims=self._dims)

    def _stage(self) -> Stage:
        start = self._expect("stage")
        name_tok = self._tok
        if name_tok.kind != "ident":
            raise self._error("Expected a stage name")
        self._advance()
        description = ""
        if self._tok.kind == "string":
            description = _unquote(self._advance().text)
        self._expect("{")
        fields: dict[str, object] = {}
        while not self._at("}"):
            key_tok = self._tok
            if key_tok.text not in ("reward", "high", "low", "description"):
                raise self._error(f"Unknown stage field {key_tok.text!r}")
            if key_tok.text in fields:
                raise self._error(f"Duplicate field {key_tok.text!r}")
            self._advance()
            self._expect(":")
            if key_tok.text == "reward":
                fields["reward"] = self._scalar_expr(key_tok)
            elif key_tok.text == "description":
                if self._tok.kind != "string":
                    raise self._error("Expected a quoted description")
                fields["description"] = _unquote(self._advance().text)
            else:
                fields[key_tok.text] = self._signed_number()
            self._expect(";")
        self._expect("}")
        for required in ("reward", "high", "low"):
            if required not in fields:
                raise RewardSyntaxError(
                    f"Stage {name_tok.text!r} is missing '{required}:'", start.line, start.column
                )
        high = float(fields["high"])  # type: ignore[arg-type]
        low = float(fields["low"])  # type: ignore[arg-type]
        if not (math.isfinite(high) and math.isfinite(low)) or not high > low:
            raise RewardSyntaxError(
                f"Stage {name_tok.text!r} needs finite thresholds with high > low, "
                f"got high={high!r}, low={low!r}",
                start.line,
                start.column,
            )
        return Stage(
            name=name_tok.text,
            reward=fields["reward"],  # type: ignore[arg-type]
            high=high,
            low=low,
            description=str(fields.get("description", description)),
        )

    def _scalar_expr(self, at: Token) -> Node:
        expr, width = self._expr()
        if width != 1:
            raise RewardSyntaxError(
                f"Stage reward must be a scalar, got width {width}", at.line, at.column
            )
        return expr

    # -- expressions (each returns node and width) --------------------------

    def _expr(self) -> tuple[Node, int]:
        left, lw = self._term()
        while self._at("+") or self._at("-"):
            op = self._advance()
            right, rw = self._term()
            left, lw = Binary(op.text, left, right), _broadcast(lw, rw, op)
        return left, lw

    def _term(self) -> tuple[Node, int]:
        left, lw = self._unary()
        while self._at("*") or self._at("/"):
            op = self._advance()
            right, rw = self._unary()
            left, lw = Binary(op.text, left, right), _broadcast(lw, rw, op)
        return left, lw

    def _unary(self) -> tuple[Node, int]:
        if self._at("-"):
            self._advance()
            arg, width = self._unary()
            if isinstance(arg, Const):
                return Const(-arg.value), width
            return Unary("neg", arg), width
        return self._power()

    def _power(self) -> tuple[Node, int]:
        base, width = self._primary()
        if self._at("^"):
            self._advance()
            if not (self._tok.kind == "number" or self._at("-")):
                raise self._error("Exponent of '^' must be a numeric constant")
            if self._at("-") and self._tokens[self._pos + 1].kind != "number":
                raise self._error("Exponent of '^' must be a numeric constant")
            return Power(base, self._signed_number()), width
        return base, width

    def _primary(self) -> tuple[Node, int]:
        tok = self._tok
        if tok.kind == "number":
            self._advance()
            return Const(float(tok.text)), 1
        if self._at("("):
            self._advance()
            inner = self._expr()
            self._expect(")")
            return inner
        if tok.kind != "ident":
            raise self._error(f"Unexpected {tok.text or 'end of input'!r}")
        name = tok.text
        if name not in _KEYWORDS:
            raise self._error(f"Unknown identifier {name!r}")
        self._advance()
        dims = self._dims
        if name == "a":
            time = self._time_index()
            sel = self._selector(dims.D)
            return ChunkRef("a", time, sel), selector_width(sel, dims.D)
        if name == "cum":
            self._expect("(")
            self._expect("a")
            self._expect(")")
            time = self._time_index()
            sel = self._selector(dims.positional)
            return ChunkRef("cum", time, sel), selector_width(sel, dims.positional)
        if name == "p":
            self._expect("[")
            idx_tok = self._tok
            i = self._int()
            if i >= dims.n:
                raise self._error(f"Keypoint index {i} out of range for n={dims.n}", idx_tok)
            self._expect("]")
            sel = self._selector(dims.positional)
            return KeypointRef(i, sel), selector_width(sel, dims.positional)
        if name == "grip_start":
            sel = self._selector(dims.positional)
            return GripRef(sel), selector_width(sel, dims.positional)
        if name in UNARY_FUNCTIONS:
            self._expect("(")
            arg, width = self._expr()
            self._expect(")")
            return Unary(name, arg), width
        if name in REDUCTIONS:
            return self._reduction(tok)
        if name == "norm2":
            self._expect("(")
            arg, _ = self._expr()
            self._expect(")")
            return Norm(arg), 1
        if name == "dot":
            self._expect("(")
            left, lw = self._expr()
            comma = self._expect(",")
            right, rw = self._expr()
            self._expect(")")
            if lw != rw:
                raise RewardSyntaxError(
                    f"dot() needs equal widths, got {lw} and {rw}", comma.line, comma.column
                )
            return Dot(left, right), 1
        raise self._error(f"Identifier {name!r} cannot start an expression", tok)

    def _reduction(self, tok: Token) -> tuple[Node, int]:
        self._expect("(")
        tau: float | None = None
        if tok.text in ("softmin_t", "softmax_t"):
            tau_tok = self._tok
            tau = self._signed_number()
            if not tau > 0.0:
                raise self._error(f"Temperature must be positive, got {tau!r}", tau_tok)
            self._expect(",")
        self._reductions += 1
        arg, width = self._expr()
        self._reductions -= 1
        self._expect(")")
        node = Reduce(tok.text, arg, tau)
        start, stop = reduction_range(node, self._dims.T)
        if stop <= start:
            raise RewardSyntaxError(
                f"{tok.text} has no valid time steps for its offsets", tok.line, tok.column
            )
        return node, width

    def _time_index(self) -> Index:
        self._expect("[")
        tok = self._tok
        horizon = self._dims.T
        if self._at("t"):
            if self._reductions == 0:
                raise self._error("Index 't' is only valid inside a reduction")
            self._advance()
            offset = 0
            if self._at("+") or self._at("-"):
                sign = 1 if self._advance().text == "+" else -1
                offset = sign * self._int()
            if abs(offset) >= horizon:
                raise self._error(f"Offset {offset} leaves no valid steps for T={horizon}", tok)
            index = Index("t", offset)
        elif self._at("T"):
            self._advance()
            offset = 0
            if self._at("-"):
                self._advance()
                offset = -self._int()
            index = Index("T", offset)
        else:
            index = Index("int", self._int())
        self._expect("]")
        if index.base != "t" and not 0 <= index.resolve(horizon) < horizon:
            raise RewardSyntaxError(
                f"Time index {index.resolve(horizon)} out of range for T={horizon}",
                tok.line,
                tok.column,
            )
        return index

    def _selector(self, full: int) -> Selector | None:
        if not self._at("["):
            return None
        self._advance()
        tok = self._tok
        lo = self._int()
        if self._at(":"):
            self._advance()
            hi = self._int()
            sel = Selector(lo, hi, True)
        else:
            sel = Selector(lo, lo + 1, False)
        self._expect("]")
        if not 0 <= sel.lo < sel.hi <= full:
            raise RewardSyntaxError(
                f"Coordinate selection [{sel.lo}:{sel.hi}] out of range for width {full}",
                tok.line,
                tok.column,
            )
        return sel


def _broadcast(lw: int, rw: int, at: Token) -> int:
    if lw == rw or rw == 1:
        return lw
    if lw == 1:
        return rw
    raise RewardSyntaxError(
        f"Operator {at.text!r} applied to widths {lw} and {rw}", at.line, at.column
    )


def _unquote(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text[1:-1])


def parse_reward(text: str, dims: RewardDims) -> RewardProgram:
    """Parse and validate a reward program against ``dims``."""
    if not text.strip():
        raise RewardSyntaxError("Empty reward program", 1, 1)
    return _Parser(text, dims).program()


def parse_dims_header(line: str) -> RewardDims:
    m = _HEADER_RE.match(line)
    if m is None:
        raise RewardSyntaxError("Expected header 'dims T=<int> D=<int> n=<int>'", 1, 1)
    return RewardDims(int(m.group(1)), int(m.group(2)), int(m.group(3)))


def load_reward(path: str | Path) -> RewardProgram:
    """Load a ``.reward`` file whose first non-blank line is the dims header."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if line.strip():
            dims = parse_dims_header(line)
            # Blank the header so reported line numbers match the file.
            body = "\n" * (i + 1) + "\n".join(lines[i + 1:])
            logger.debug("Loading reward program %s with dims %s", path, dims)
            return parse_reward(body, dims)
    raise RewardSyntaxError(f"{path} is empty", 1, 1)
