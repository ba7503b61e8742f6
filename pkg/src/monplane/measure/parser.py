"""Tokenizer, recursive-descent parser, and static validation.

Grammar:

    program  = "measurements" "{" {mdecl} "}"
               "zones" "{" {zdecl} "}"
               "actions" "{" {adecl} "}"
    mdecl    = id "=" id "(" arglist ")" ";"
    zdecl    = id "=" aggexpr cmp literal ";"
    adecl    = [id] "->" id "=" "Notify" "(" id "," "[" payload "]" ")" ";"
    aggexpr  = agg "(" int "," mexpr ")"          agg in mean|max|min|sum
    mexpr    = term { ("+"|"-") term }
    term     = mref | combiner "(" mexpr {"," mexpr} ")"
    cmp      = ">" | ">=" | "<" | "<=" | "=="

The combiner form of `term` is not produced by hand-written sources; it
is how programs rewritten for parallel decomposition print their k-ary
max/min nodes, and accepting it keeps pretty-printed programs parseable.

Hyphens inside measurement-argument names (locations like FW-SAP1) are
re-joined by the arg parser; everywhere else `-` is the minus operator.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from ..units import Dimension, Quantity, UnitError, parse_literal
from .ast import (
    AGG_KINDS,
    COMBINE_OPS,
    COMPARATORS,
    ActionDecl,
    AggExpr,
    BinOp,
    Combine,
    Identifier,
    Literal,
    MExpr,
    MeasureProgram,
    MeasurementDecl,
    MRef,
    Notify,
    PayloadExpr,
    PayloadItem,
    PayloadString,
    ZoneDecl,
    mexpr_refs,
    print_mexpr,
)
from .errors import DuplicateId, MeasureSyntaxError, UnitMismatch, UnknownReference

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<literal>[0-9]+(?:\.[0-9]+)?(?:us|ms|s|hz|%)?)
  | (?P<id>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<op>->|==|>=|<=|[{}()\[\],;=><+-])
    """,
    re.VERBOSE,
)

#: measurement functions with a known result dimension; unknown functions
#: accept any comparison unit
FUNCTION_DIMENSIONS = {
    "delay": Dimension.TIME,
    "jitter": Dimension.TIME,
    "loss": Dimension.RATIO,
    "risk": Dimension.RATIO,
    "rate": Dimension.FREQUENCY,
}


@dataclass(frozen=True)
class Token:
    type: str  # "id" | "literal" | "string" | "op" | "eof"
    value: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    line, col, pos = 1, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise MeasureSyntaxError(line, col, "a token", repr(source[pos]))
        kind = m.lastgroup
        text = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, text, line, col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def cur(self) -> Token:
        return self.tokens[self.pos]

    def error(self, expected: str) -> MeasureSyntaxError:
        tok = self.cur
        found = tok.value if tok.type != "eof" else "end of input"
        return MeasureSyntaxError(tok.line, tok.col, expected, repr(found))

    def accept(self, type_: str, value: Optional[str] = None) -> Optional[Token]:
        tok = self.cur
        if tok.type == type_ and (value is None or tok.value == value):
            self.pos += 1
            return tok
        return None

    def expect(self, type_: str, value: Optional[str] = None) -> Token:
        tok = self.accept(type_, value)
        if tok is None:
            raise self.error(value if value is not None else type_)
        return tok

    # ------------------------------------------------------------------

    def program(self) -> MeasureProgram:
        self.expect("id", "measurements")
        self.expect("op", "{")
        measurements = []
        while not self.accept("op", "}"):
            measurements.append(self.mdecl())
        self.expect("id", "zones")
        self.expect("op", "{")
        zones = []
        while not self.accept("op", "}"):
            zones.append(self.zdecl())
        self.expect("id", "actions")
        self.expect("op", "{")
        actions = []
        while not self.accept("op", "}"):
            actions.append(self.adecl())
        self.expect("eof")
        return MeasureProgram(tuple(measurements), tuple(zones), tuple(actions))

    def mdecl(self) -> MeasurementDecl:
        name = self.expect("id")
        self.expect("op", "=")
        function = self.expect("id")
        self.expect("op", "(")
        args: list = []
        if not self.accept("op", ")"):
            args.append(self.arg())
            while self.accept("op", ","):
                args.append(self.arg())
            self.expect("op", ")")
        self.expect("op", ";")
        return MeasurementDecl(name.value, function.value, tuple(args), (name.line, name.col))

    def arg(self):
        """One measurement argument: a (possibly hyphenated) location
        identifier or a unit-bearing literal."""
        lit = self.accept("literal")
        if lit is not None:
            return Literal(self._quantity(lit), lit.value)
        tok = self.expect("id")
        parts = [tok.value]
        while self.cur.type == "op" and self.cur.value == "-":
            nxt = self.tokens[self.pos + 1]
            if nxt.type not in ("id", "literal"):
                break
            self.pos += 1
            parts.append(self.expect(nxt.type).value)
        return Identifier("-".join(parts))

    def zdecl(self) -> ZoneDecl:
        name = self.expect("id")
        self.expect("op", "=")
        agg = self.aggexpr()
        cmp_tok = self.cur
        if cmp_tok.type != "op" or cmp_tok.value not in COMPARATORS:
            raise self.error("a comparison operator")
        self.pos += 1
        lit = self.expect("literal")
        self.expect("op", ";")
        literal = Literal(self._quantity(lit), lit.value)
        return ZoneDecl(name.value, agg, cmp_tok.value, literal, (name.line, name.col))

    def aggexpr(self) -> AggExpr:
        kind = self.expect("id")
        if kind.value not in AGG_KINDS:
            raise MeasureSyntaxError(
                kind.line, kind.col, "one of mean/max/min/sum", repr(kind.value)
            )
        self.expect("op", "(")
        window_tok = self.expect("literal")
        try:
            window = int(window_tok.value)
        except ValueError:
            raise MeasureSyntaxError(
                window_tok.line, window_tok.col, "an integer window", repr(window_tok.value)
            ) from None
        if window < 1:
            raise MeasureSyntaxError(
                window_tok.line, window_tok.col, "window >= 1", repr(window_tok.value)
            )
        self.expect("op", ",")
        expr = self.mexpr()
        self.expect("op", ")")
        return AggExpr(kind.value, window, expr)

    def mexpr(self) -> MExpr:
        expr = self.mterm()
        while self.cur.type == "op" and self.cur.value in ("+", "-"):
            op = self.expect("op").value
            expr = BinOp(op, expr, self.mterm())
        return expr

    def mterm(self) -> MExpr:
        tok = self.expect("id")
        if tok.value in COMBINE_OPS and self.cur.type == "op" and self.cur.value == "(":
            self.expect("op", "(")
            items = [self.mexpr()]
            while self.accept("op", ","):
                items.append(self.mexpr())
            self.expect("op", ")")
            return Combine(tok.value, tuple(items))
        return MRef(tok.value)

    def adecl(self) -> ActionDecl:
        first = self.cur
        from_zone = None
        tok = self.accept("id")
        if tok is not None:
            from_zone = tok.value
        self.expect("op", "->")
        to_zone = self.expect("id").value
        self.expect("op", "=")
        self.expect("id", "Notify")
        self.expect("op", "(")
        dest = self.expect("id").value
        self.expect("op", ",")
        self.expect("op", "[")
        payload: list[PayloadItem] = []
        if not self.accept("op", "]"):
            payload.append(self.payload_item())
            while self.accept("op", ","):
                payload.append(self.payload_item())
            self.expect("op", "]")
        self.expect("op", ")")
        self.expect("op", ";")
        return ActionDecl(
            from_zone, to_zone, Notify(dest, tuple(payload)), (first.line, first.col)
        )

    def payload_item(self) -> PayloadItem:
        tok = self.accept("string")
        if tok is not None:
            text = tok.value[1:-1].replace('\\"', '"').replace("\\\\", "\\")
            return PayloadString(text)
        expr = self.mexpr()
        return PayloadExpr(expr, print_mexpr(expr))

    def _quantity(self, tok: Token) -> Quantity:
        try:
            return parse_literal(tok.value)
        except UnitError:
            raise MeasureSyntaxError(tok.line, tok.col, "a literal", repr(tok.value)) from None


def parse(source: str) -> MeasureProgram:
    """Parse and validate a program (declaration order preserved)."""
    program = _Parser(tokenize(source)).program()
    validate(program)
    return program


# ---------------------------------------------------------------------------
# static validation


def validate(program: MeasureProgram) -> None:
    seen: set[str] = set()
    for m in program.measurements:
        if m.id in seen:
            raise DuplicateId(f"measurement {m.id!r} declared twice")
        seen.add(m.id)
    zone_ids: set[str] = set()
    for z in program.zones:
        if z.id in seen or z.id in zone_ids:
            raise DuplicateId(f"zone {z.id!r} collides with an earlier declaration")
        zone_ids.add(z.id)
    declared = set(program.measurement_ids)
    for z in program.zones:
        for ref in mexpr_refs(z.agg.expr):
            if ref not in declared:
                raise UnknownReference(ref)
        _check_zone_units(z, program)
    for a in program.actions:
        for zone in filter(None, (a.from_zone, a.to_zone)):
            if zone not in zone_ids:
                raise UnknownReference(zone)
        for item in a.notify.payload:
            if isinstance(item, PayloadExpr):
                for ref in mexpr_refs(item.expr):
                    if ref not in declared:
                        raise UnknownReference(ref)


def _expr_dimension(expr: MExpr, program: MeasureProgram) -> Optional[Dimension]:
    """Common dimension of the expression's measurements, None if unknown."""
    dims = set()
    for ref in mexpr_refs(expr):
        dim = FUNCTION_DIMENSIONS.get(program.measurement(ref).function)
        if dim is not None:
            dims.add(dim)
    if len(dims) > 1:
        raise UnitMismatch(f"expression mixes dimensions: {sorted(d.value for d in dims)}")
    return dims.pop() if dims else None


def _check_zone_units(zone: ZoneDecl, program: MeasureProgram) -> None:
    lit_dim = zone.literal.quantity.dimension
    if lit_dim is Dimension.FREQUENCY:
        raise UnitMismatch(
            f"zone {zone.id!r}: hz literals belong in measurement arguments, "
            "not zone comparisons"
        )
    expr_dim = _expr_dimension(zone.agg.expr, program)
    if (
        expr_dim is not None
        and lit_dim is not Dimension.SCALAR
        and lit_dim is not expr_dim
    ):
        raise UnitMismatch(
            f"zone {zone.id!r}: comparing {expr_dim.value} measurements "
            f"against a {lit_dim.value} literal"
        )
