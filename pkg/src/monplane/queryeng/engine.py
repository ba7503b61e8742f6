"""Graph store and semi-naive fixpoint evaluation.

Rules without function calls are saturated first (semi-naive: each round
joins at least one newly derived fact). Rules with fn-calls form a final
stratum evaluated once, goal-directed against the query atom, after their
relational arguments are fully ground; a head predicate of an fn-rule may
not occur in any rule body (NonStratifiedFnCall otherwise).

The store itself is immutable after load; evaluation never mutates it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .datalog import (
    Atom,
    Constant,
    DatalogError,
    FnCall,
    Rule,
    Term,
    Variable,
    parse_facts,
)
from .metrics import MetricsStore


class EvaluationError(DatalogError):
    pass


class CyclicSub(EvaluationError):
    pass


class UnknownPredicate(EvaluationError):
    pass


class NonStratifiedFnCall(EvaluationError):
    pass


class UnknownNode(EvaluationError):
    pass


class GraphStore:
    """Ground facts indexed by predicate (and by first argument)."""

    def __init__(self, facts: Iterable[Atom]):
        self.facts: dict[str, set[tuple[str, ...]]] = {}
        for fact in facts:
            args = tuple(t.name for t in fact.terms)
            self.facts.setdefault(fact.predicate, set()).add(args)
        self._by_first: dict[tuple[str, str], set[tuple[str, ...]]] = {}
        for pred, rows in self.facts.items():
            for row in rows:
                if row:
                    self._by_first.setdefault((pred, row[0]), set()).add(row)
        self._check_sub_acyclic()

    def _check_sub_acyclic(self) -> None:
        children: dict[str, list[str]] = {}
        for row in self.facts.get("sub", ()):
            children.setdefault(row[0], []).append(row[1])
        WHITE, GRAY, BLACK = 0, 1, 2
        color: dict[str, int] = {}

        def visit(node: str) -> None:
            color[node] = GRAY
            for child in children.get(node, ()):
                state = color.get(child, WHITE)
                if state == GRAY:
                    raise CyclicSub(f"sub cycle through {child!r}")
                if state == WHITE:
                    visit(child)
            color[node] = BLACK

        for node in list(children):
            if color.get(node, WHITE) == WHITE:
                visit(node)

    def rows(self, predicate: str) -> set[tuple[str, ...]]:
        return self.facts.get(predicate, set())

    def rows_with_first(self, predicate: str, first: str) -> set[tuple[str, ...]]:
        return self._by_first.get((predicate, first), set())

    def nodes(self) -> set[str]:
        out: set[str] = set()
        for rows in self.facts.values():
            for row in rows:
                out.update(row)
        return out

    def has_children(self, name: str) -> bool:
        return bool(self.rows_with_first("sub", name))

    def as_kvp(self) -> list[tuple[str, ...]]:
        """Key-value view of the fact set: ("kvp", pred, arg1, ...)."""
        return sorted(
            ("kvp", pred, *row) for pred, rows in self.facts.items() for row in rows
        )


def load_graph(source: str | Iterable[Atom]) -> GraphStore:
    """Build a store from fact-file text or pre-parsed ground atoms."""
    facts = parse_facts(source) if isinstance(source, str) else list(source)
    return GraphStore(facts)


def builtin_is_leaf(store: GraphStore, name: str) -> bool:
    """A node is a leaf iff it decomposes no further (no sub(x, _))."""
    if name not in store.nodes():
        raise UnknownNode(name)
    return not store.has_children(name)


#: builtin predicates usable in rule bodies; args must be ground by the
#: time they are checked (they are filters, not generators)
BUILTIN_PREDICATES: dict[str, Callable[[GraphStore, tuple[str, ...]], bool]] = {
    "is_Leaf": lambda store, args: builtin_is_leaf(store, args[0]),
    "is_leaf": lambda store, args: builtin_is_leaf(store, args[0]),
}


@dataclass
class FnContext:
    store: GraphStore
    metrics: Optional[MetricsStore]
    facts: dict[str, set[tuple[str, ...]]]  # saturated relational fixpoint


Binding = dict[str, str]


def _match_atom(
    atom: Atom, rows: Iterable[tuple[str, ...]], binding: Binding
) -> Iterable[Binding]:
    for row in rows:
        if len(row) != len(atom.terms):
            continue
        new = dict(binding)
        ok = True
        for term, value in zip(atom.terms, row):
            if isinstance(term, Constant):
                if term.name != value:
                    ok = False
                    break
            else:
                seen = new.get(term.name)
                if seen is None:
                    new[term.name] = value
                elif seen != value:
                    ok = False
                    break
        if ok:
            yield new


def _join_body(
    atoms: Sequence[Atom],
    facts: dict[str, set[tuple[str, ...]]],
    store: GraphStore,
    binding: Binding,
    delta: Optional[dict[str, set[tuple[str, ...]]]] = None,
    delta_at: int = -1,
    index: int = 0,
) -> Iterable[Binding]:
    """All bindings satisfying the relational atoms left to right; builtin
    predicates are applied as filters once their arguments are ground."""
    if index == len(atoms):
        yield binding
        return
    atom = atoms[index]
    if atom.predicate in BUILTIN_PREDICATES:
        args = []
        for term in atom.terms:
            value = term.name if isinstance(term, Constant) else binding.get(term.name)
            if value is None:
                raise EvaluationError(
                    f"builtin {atom.predicate} needs ground arguments; "
                    f"{term.name} is unbound"
                )
            args.append(value)
        if BUILTIN_PREDICATES[atom.predicate](store, tuple(args)):
            yield from _join_body(atoms, facts, store, binding, delta, delta_at, index + 1)
        return
    source = delta if index == delta_at else facts
    rows = (source or facts).get(atom.predicate, set())
    for new in _match_atom(atom, rows, binding):
        yield from _join_body(atoms, facts, store, new, delta, delta_at, index + 1)


def _head_row(head: Atom, binding: Binding) -> tuple[str, ...]:
    return tuple(
        t.name if isinstance(t, Constant) else binding[t.name] for t in head.terms
    )


def _order_body(atoms: Sequence[Atom]) -> list[Atom]:
    relational = [a for a in atoms if a.predicate not in BUILTIN_PREDICATES]
    builtins = [a for a in atoms if a.predicate in BUILTIN_PREDICATES]
    return relational + builtins


def _saturate(store: GraphStore, rules: Sequence[Rule]) -> dict[str, set[tuple[str, ...]]]:
    """Semi-naive fixpoint over the relational rules."""
    facts: dict[str, set[tuple[str, ...]]] = {
        pred: set(rows) for pred, rows in store.facts.items()
    }
    ordered = [(rule, _order_body(rule.relational_atoms)) for rule in rules]

    def derive(delta: Optional[dict[str, set[tuple[str, ...]]]]) -> dict[str, set]:
        fresh: dict[str, set] = {}
        for rule, body in ordered:
            positions = range(len(body)) if delta is not None else [-1]
            for pos in positions:
                if delta is not None:
                    atom = body[pos]
                    if (
                        atom.predicate in BUILTIN_PREDICATES
                        or atom.predicate not in delta
                    ):
                        continue
                for binding in _join_body(
                    body, facts, store, {}, delta, pos if delta is not None else -1
                ):
                    row = _head_row(rule.head, binding)
                    if row not in facts.get(rule.head.predicate, set()):
                        fresh.setdefault(rule.head.predicate, set()).add(row)
        return fresh

    delta = derive(None)
    while delta:
        for pred, rows in delta.items():
            facts.setdefault(pred, set()).update(rows)
        delta = derive(delta)
    return facts


def _resolve_fn_arg(arg, binding: Binding, ctx: FnContext):
    """Ground terms pass through; nested atoms evaluate to the sorted values
    of their variables against the saturated fixpoint."""
    if isinstance(arg, (Variable, Constant)):
        if isinstance(arg, Constant):
            return arg.name
        value = binding.get(arg.name)
        if value is None:
            raise EvaluationError(f"fn argument {arg.name} is unbound")
        return value
    substituted = Atom(
        arg.predicate,
        tuple(
            Constant(binding[t.name])
            if isinstance(t, Variable) and t.name in binding
            else t
            for t in arg.terms
        ),
    )
    rows = ctx.facts.get(substituted.predicate, set())
    values = []
    for sub_binding in _match_atom(substituted, rows, {}):
        ordered = tuple(sub_binding[v] for v in sorted(sub_binding))
        values.append(ordered[0] if len(ordered) == 1 else ordered)
    return tuple(sorted(set(values)))


def evaluate(
    store: GraphStore,
    rules: Sequence[Rule],
    query: Atom,
    metrics: Optional[MetricsStore] = None,
    functions: Optional[dict[str, Callable]] = None,
) -> set[tuple[str, ...]]:
    """All ground rows derivable for the query atom's predicate that match
    its constant positions."""
    relational = [r for r in rules if not r.fn_calls]
    fn_rules = [r for r in rules if r.fn_calls]
    _check_stratified(rules, fn_rules)

    facts = _saturate(store, relational)
    ctx = FnContext(store=store, metrics=metrics, facts=facts)

    if functions is None:
        from .functions import FN_REGISTRY

        functions = FN_REGISTRY

    target_fn_rules = [r for r in fn_rules if r.head.predicate == query.predicate]
    for rule in target_fn_rules:
        _apply_fn_rule(rule, query, ctx, facts, functions)

    known = (
        set(facts)
        | {r.head.predicate for r in rules}
        | set(BUILTIN_PREDICATES)
    )
    if query.predicate not in known:
        raise UnknownPredicate(query.predicate)
    return set(_rows_matching(query, facts))


def _rows_matching(query: Atom, facts: dict[str, set[tuple[str, ...]]]):
    for binding in _match_atom(query, facts.get(query.predicate, set()), {}):
        yield _head_row(query, binding)


def _apply_fn_rule(
    rule: Rule,
    query: Atom,
    ctx: FnContext,
    facts: dict[str, set[tuple[str, ...]]],
    functions: dict[str, Callable],
) -> None:
    # goal-direct: unify the head with the query's constants so fn escapes
    # only run for the bindings the caller asked about
    seed: Binding = {}
    for head_term, query_term in zip(rule.head.terms, query.terms):
        if isinstance(query_term, Constant) and isinstance(head_term, Variable):
            if seed.setdefault(head_term.name, query_term.name) != query_term.name:
                return
        elif isinstance(query_term, Constant) and isinstance(head_term, Constant):
            if query_term.name != head_term.name:
                return
    body = _order_body(rule.relational_atoms)
    for binding in _join_body(body, facts, ctx.store, dict(seed)):
        full = dict(binding)
        implicit_target = next(
            iter(rule.head.variables() - set(full) - {c.result_var for c in rule.fn_calls if c.result_var}),
            None,
        )
        for call in rule.fn_calls:
            fn = functions.get(call.fn)
            if fn is None:
                raise UnknownPredicate(call.fn)
            args = [_resolve_fn_arg(a, full, ctx) for a in call.args]
            result = fn(ctx, *args)
            target = call.result_var or implicit_target
            if target is not None:
                full[target] = str(result)
        row = _head_row(rule.head, full)
        facts.setdefault(rule.head.predicate, set()).add(row)


def _check_stratified(rules: Sequence[Rule], fn_rules: Sequence[Rule]) -> None:
    fn_heads = {r.head.predicate for r in fn_rules}
    for rule in rules:
        body_atoms = list(rule.relational_atoms)
        for call in rule.fn_calls:
            body_atoms.extend(a for a in call.args if isinstance(a, Atom))
        for atom in body_atoms:
            if atom.predicate in fn_heads:
                raise NonStratifiedFnCall(
                    f"{atom.predicate} is derived by an fn-rule but used in the "
                    f"body of {rule.id or str(rule.head)}"
                )
