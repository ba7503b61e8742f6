"""Terms, atoms, rules, and their parsers.

Variables begin with an upper-case letter, constants and predicates with
a lower-case letter. A rule is ``[R<n>:] head <= body`` where the body is
a comma-separated conjunction of atoms and function calls; function names
start with ``fn_`` and escape into registered Python functions. A call
either binds an explicit variable (``P == fn_e2e_delay(S, D)``) or, when
written bare, binds the single head variable the relational body leaves
unbound.

Fact files hold one ground fact per line, ``pred(arg1,arg2)``, with ``#``
comments. Fact predicates are the graph keywords sub/link/node plus the
role facts is_ingress/is_egress/is_compute (is_source and is_dst are
accepted as aliases of the first two).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union


class DatalogError(Exception):
    pass


class ParseError(DatalogError):
    pass


class UnsafeRule(DatalogError):
    """A head variable is not bound anywhere in the body."""


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Constant:
    name: str


Term = Union[Variable, Constant]


@dataclass(frozen=True)
class Atom:
    predicate: str
    terms: tuple[Term, ...]

    def variables(self) -> set[str]:
        return {t.name for t in self.terms if isinstance(t, Variable)}

    def is_ground(self) -> bool:
        return all(isinstance(t, Constant) for t in self.terms)

    def __str__(self) -> str:
        return f"{self.predicate}({', '.join(t.name for t in self.terms)})"


FnArg = Union[Term, Atom]


@dataclass(frozen=True)
class FnCall:
    result_var: Optional[str]  # None binds the sole unbound head variable
    fn: str
    args: tuple[FnArg, ...]


BodyLiteral = Union[Atom, FnCall]


@dataclass(frozen=True)
class Rule:
    head: Atom
    body: tuple[BodyLiteral, ...]
    id: Optional[str] = field(default=None, compare=False)

    @property
    def fn_calls(self) -> tuple[FnCall, ...]:
        return tuple(b for b in self.body if isinstance(b, FnCall))

    @property
    def relational_atoms(self) -> tuple[Atom, ...]:
        return tuple(b for b in self.body if isinstance(b, Atom))


FACT_PREDICATES = {"sub", "link", "node", "is_ingress", "is_egress", "is_compute"}
PREDICATE_ALIASES = {"is_source": "is_ingress", "is_dst": "is_egress"}

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_ATOM_RE = re.compile(rf"\s*({_NAME})\s*\(([^()]*)\)\s*")
_RULE_ID_RE = re.compile(r"^\s*(R[0-9]+)\s*:\s*")


def _parse_term(text: str) -> Term:
    text = text.strip()
    if not re.fullmatch(_NAME, text):
        raise ParseError(f"bad term {text!r}")
    return Variable(text) if text[0].isupper() else Constant(text)


def _normalize_predicate(name: str) -> str:
    return PREDICATE_ALIASES.get(name, name)


def parse_atom(text: str) -> Atom:
    m = _ATOM_RE.fullmatch(text)
    if m is None:
        raise ParseError(f"bad atom {text!r}")
    predicate, args = m.groups()
    if predicate[0].isupper():
        predicate = predicate[0].lower() + predicate[1:]
    terms = tuple(_parse_term(a) for a in args.split(",")) if args.strip() else ()
    return Atom(_normalize_predicate(predicate), terms)


def parse_fact(text: str) -> Atom:
    atom = parse_atom(text)
    if atom.predicate not in FACT_PREDICATES:
        raise ParseError(
            f"fact predicate {atom.predicate!r} outside "
            f"{sorted(FACT_PREDICATES)} (or an alias)"
        )
    if not atom.is_ground():
        raise ParseError(f"fact {text!r} contains variables")
    return atom


def parse_facts(source: str) -> list[Atom]:
    """One fact per line; blank lines and # comments ignored."""
    facts = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            facts.append(parse_fact(line))
        except ParseError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    return facts


def _split_top_level(text: str, sep: str = ",") -> list[str]:
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(text):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ParseError(f"unbalanced parentheses in {text!r}")
        elif ch == sep and depth == 0:
            parts.append(text[start:i])
            start = i + 1
    if depth != 0:
        raise ParseError(f"unbalanced parentheses in {text!r}")
    parts.append(text[start:])
    return [p for p in parts if p.strip()]


def _parse_fn_args(text: str) -> tuple[FnArg, ...]:
    args: list[FnArg] = []
    for part in _split_top_level(text):
        part = part.strip()
        if "(" in part:
            args.append(parse_atom(part))
        else:
            args.append(_parse_term(part))
    return tuple(args)


def _parse_body_literal(text: str) -> BodyLiteral:
    text = text.strip()
    eq = re.fullmatch(rf"({_NAME})\s*==\s*(fn_{_NAME})\s*\((.*)\)", text)
    if eq:
        var, fn, args = eq.groups()
        if not var[0].isupper():
            raise ParseError(f"fn result must bind a variable, got {var!r}")
        return FnCall(var, fn, _parse_fn_args(args))
    bare = re.fullmatch(rf"(fn_{_NAME})\s*\((.*)\)", text)
    if bare:
        fn, args = bare.groups()
        return FnCall(None, fn, _parse_fn_args(args))
    return parse_atom(text)


def parse_rule(text: str) -> Rule:
    rule_id = None
    m = _RULE_ID_RE.match(text)
    if m:
        rule_id = m.group(1)
        text = text[m.end() :]
    if "<=" not in text:
        raise ParseError(f"rule needs '<=': {text!r}")
    head_text, body_text = text.split("<=", 1)
    head = parse_atom(head_text)
    body = tuple(_parse_body_literal(p) for p in _split_top_level(body_text))
    if not body:
        raise ParseError(f"empty rule body in {text!r}")
    rule = Rule(head=head, body=body, id=rule_id)
    _check_safety(rule)
    return rule


def parse_rules(source: str) -> list[Rule]:
    """One rule per line; blank lines and # comments ignored."""
    rules = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rules.append(parse_rule(line))
        except DatalogError as exc:
            raise type(exc)(f"line {lineno}: {exc}") from None
    return rules


def _check_safety(rule: Rule) -> None:
    bound: set[str] = set()
    for atom in rule.relational_atoms:
        bound |= atom.variables()
    implicit_binders = 0
    for call in rule.fn_calls:
        if call.result_var is not None:
            bound.add(call.result_var)
        else:
            implicit_binders += 1
    unbound = rule.head.variables() - bound
    if len(unbound) > 1 or (unbound and implicit_binders != 1):
        raise UnsafeRule(
            f"head variables {sorted(unbound)} not bound in the body of "
            f"{rule.id or str(rule.head)}"
        )
