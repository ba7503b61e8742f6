"""Program rewriting under NF decomposition.

Parallel(k, max|min): the measurement is replaced by k replicas (same
function, per-replica endpoints) and every use becomes a k-ary combiner
over the replicas. Parallel(k, sum) expresses the combination as a +
chain instead, which is how additive metrics such as loss compose.
Serial keeps the single measurement, optionally relabeling endpoints.

Replica naming: measurement ``m1`` with k=3 becomes m1a, m1b, m1c, and
each identifier argument gains the matching ``-a``/``-b``/``-c`` suffix.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Union

from .ast import (
    ActionDecl,
    AggExpr,
    BinOp,
    Combine,
    Identifier,
    MeasureProgram,
    MeasurementDecl,
    MExpr,
    MRef,
    Notify,
    PayloadExpr,
    PayloadString,
    ZoneDecl,
    print_mexpr,
)
from .errors import UnknownMeasurement, UnsupportedCombiner
from .parser import validate


@dataclass(frozen=True)
class Parallel:
    k: int
    combiner: str  # "max" | "sum" | "min"


@dataclass(frozen=True)
class Serial:
    endpoint_map: dict = field(default_factory=dict)  # old location -> new


DecompositionRule = Union[Parallel, Serial]


def _replica_tags(k: int) -> list[str]:
    if not 1 <= k <= 26:
        raise UnsupportedCombiner(f"parallel degree {k} outside 1..26")
    return list(string.ascii_lowercase[:k])


def _replace_refs(expr: MExpr, replacements: dict[str, MExpr]) -> MExpr:
    if isinstance(expr, MRef):
        return replacements.get(expr.id, expr)
    if isinstance(expr, BinOp):
        return BinOp(
            expr.op,
            _replace_refs(expr.left, replacements),
            _replace_refs(expr.right, replacements),
        )
    return Combine(expr.op, tuple(_replace_refs(e, replacements) for e in expr.items))


def _sum_chain(refs: list[MRef]) -> MExpr:
    expr: MExpr = refs[0]
    for ref in refs[1:]:
        expr = BinOp("+", expr, ref)
    return expr


def _rewritten_payload(item: PayloadExpr, replacements: dict[str, MExpr]) -> PayloadExpr:
    expr = _replace_refs(item.expr, replacements)
    return PayloadExpr(expr, print_mexpr(expr))


def rewrite_for_decomposition(
    program: MeasureProgram, subst: dict[str, DecompositionRule]
) -> MeasureProgram:
    declared = set(program.measurement_ids)
    for mid in subst:
        if mid not in declared:
            raise UnknownMeasurement(mid)
    for rule in subst.values():
        if isinstance(rule, Parallel) and rule.combiner not in ("max", "min", "sum"):
            raise UnsupportedCombiner(rule.combiner)

    measurements: list[MeasurementDecl] = []
    replacements: dict[str, MExpr] = {}
    for m in program.measurements:
        rule = subst.get(m.id)
        if rule is None:
            measurements.append(m)
            continue
        if isinstance(rule, Serial):
            args = tuple(
                Identifier(rule.endpoint_map.get(a.name, a.name))
                if isinstance(a, Identifier)
                else a
                for a in m.args
            )
            measurements.append(MeasurementDecl(m.id, m.function, args, m.pos))
            continue
        replicas: list[MRef] = []
        for tag in _replica_tags(rule.k):
            args = tuple(
                Identifier(f"{a.name}-{tag}") if isinstance(a, Identifier) else a
                for a in m.args
            )
            replica_id = f"{m.id}{tag}"
            measurements.append(MeasurementDecl(replica_id, m.function, args, m.pos))
            replicas.append(MRef(replica_id))
        if rule.combiner == "sum":
            replacements[m.id] = _sum_chain(replicas)
        else:
            replacements[m.id] = Combine(rule.combiner, tuple(replicas))

    zones = tuple(
        ZoneDecl(
            z.id,
            AggExpr(z.agg.kind, z.agg.window, _replace_refs(z.agg.expr, replacements)),
            z.cmp,
            z.literal,
            z.pos,
        )
        for z in program.zones
    )
    actions = tuple(
        ActionDecl(
            a.from_zone,
            a.to_zone,
            Notify(
                a.notify.dest,
                tuple(
                    item
                    if isinstance(item, PayloadString)
                    else _rewritten_payload(item, replacements)
                    for item in a.notify.payload
                ),
            ),
            a.pos,
        )
        for a in program.actions
    )
    rewritten = MeasureProgram(tuple(measurements), zones, actions)
    validate(rewritten)
    return rewritten
