"""AST node types plus pretty-printing and JSON/XML export.

Literals keep their source text (``10ms``) alongside the canonical
quantity so that printing a parsed program reproduces the original
spelling; parse(pretty_print(parse(src))) is a fixpoint on the AST.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional, Union

from ..units import Quantity

AGG_KINDS = ("mean", "max", "min", "sum")
COMBINE_OPS = ("max", "min", "sum")
COMPARATORS = (">", ">=", "<", "<=", "==")


@dataclass(frozen=True)
class Identifier:
    name: str


@dataclass(frozen=True)
class Literal:
    quantity: Quantity
    text: str  # source spelling, e.g. "10ms"


Arg = Union[Identifier, Literal]


@dataclass(frozen=True)
class MeasurementDecl:
    id: str
    function: str
    args: tuple[Arg, ...]
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class MRef:
    id: str


@dataclass(frozen=True)
class BinOp:
    op: str  # "+" | "-"
    left: "MExpr"
    right: "MExpr"


@dataclass(frozen=True)
class Combine:
    """k-ary combiner introduced by parallel decomposition."""

    op: str  # "max" | "min" | "sum"
    items: tuple["MExpr", ...]


MExpr = Union[MRef, BinOp, Combine]


@dataclass(frozen=True)
class AggExpr:
    kind: str  # one of AGG_KINDS
    window: int
    expr: MExpr


@dataclass(frozen=True)
class ZoneDecl:
    id: str
    agg: AggExpr
    cmp: str
    literal: Literal
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class PayloadString:
    text: str


@dataclass(frozen=True)
class PayloadExpr:
    expr: MExpr
    text: str  # source spelling, e.g. "m2-m1"


PayloadItem = Union[PayloadString, PayloadExpr]


@dataclass(frozen=True)
class Notify:
    dest: str
    payload: tuple[PayloadItem, ...]


@dataclass(frozen=True)
class ActionDecl:
    from_zone: Optional[str]  # None means entry-from-anywhere
    to_zone: str
    notify: Notify
    pos: tuple[int, int] = field(default=(0, 0), compare=False)

    @property
    def is_entry(self) -> bool:
        return self.from_zone is None


@dataclass(frozen=True)
class MeasureProgram:
    measurements: tuple[MeasurementDecl, ...]
    zones: tuple[ZoneDecl, ...]
    actions: tuple[ActionDecl, ...]

    def measurement(self, mid: str) -> MeasurementDecl:
        for m in self.measurements:
            if m.id == mid:
                return m
        raise KeyError(mid)

    @property
    def measurement_ids(self) -> tuple[str, ...]:
        return tuple(m.id for m in self.measurements)

    @property
    def zone_ids(self) -> tuple[str, ...]:
        return tuple(z.id for z in self.zones)


def mexpr_refs(expr: MExpr) -> set[str]:
    if isinstance(expr, MRef):
        return {expr.id}
    if isinstance(expr, BinOp):
        return mexpr_refs(expr.left) | mexpr_refs(expr.right)
    return set().union(*(mexpr_refs(e) for e in expr.items))


# ---------------------------------------------------------------------------
# pretty printer


def print_mexpr(expr: MExpr) -> str:
    if isinstance(expr, MRef):
        return expr.id
    if isinstance(expr, BinOp):
        return f"{print_mexpr(expr.left)} {expr.op} {print_mexpr(expr.right)}"
    inner = ", ".join(print_mexpr(e) for e in expr.items)
    return f"{expr.op}({inner})"


def _print_payload_item(item: PayloadItem) -> str:
    if isinstance(item, PayloadString):
        return json.dumps(item.text)
    return print_mexpr(item.expr)


def pretty_print(program: MeasureProgram) -> str:
    lines = ["measurements {"]
    for m in program.measurements:
        args = ", ".join(a.name if isinstance(a, Identifier) else a.text for a in m.args)
        lines.append(f"  {m.id} = {m.function}({args});")
    lines.append("}")
    lines.append("zones {")
    for z in program.zones:
        agg = f"{z.agg.kind}({z.agg.window}, {print_mexpr(z.agg.expr)})"
        lines.append(f"  {z.id} = {agg} {z.cmp} {z.literal.text};")
    lines.append("}")
    lines.append("actions {")
    for a in program.actions:
        left = f"{a.from_zone} " if a.from_zone else ""
        payload = ", ".join(_print_payload_item(i) for i in a.notify.payload)
        lines.append(f"  {left}-> {a.to_zone} = Notify({a.notify.dest}, [{payload}]);")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON / XML export


def _arg_to_dict(arg: Arg) -> dict:
    if isinstance(arg, Identifier):
        return {"kind": "identifier", "name": arg.name}
    return {"kind": "literal", "text": arg.text}


def _mexpr_to_dict(expr: MExpr) -> dict:
    if isinstance(expr, MRef):
        return {"kind": "ref", "id": expr.id}
    if isinstance(expr, BinOp):
        return {
            "kind": "binop",
            "op": expr.op,
            "left": _mexpr_to_dict(expr.left),
            "right": _mexpr_to_dict(expr.right),
        }
    return {"kind": "combine", "op": expr.op, "items": [_mexpr_to_dict(e) for e in expr.items]}


def _payload_to_list(notify: Notify) -> list[dict]:
    out = []
    for item in notify.payload:
        if isinstance(item, PayloadString):
            out.append({"kind": "string", "text": item.text})
        else:
            out.append({"kind": "expr", "expr": _mexpr_to_dict(item.expr), "text": item.text})
    return out


def program_to_dict(program: MeasureProgram) -> dict:
    return {
        "measurements": [
            {"id": m.id, "function": m.function, "args": [_arg_to_dict(a) for a in m.args]}
            for m in program.measurements
        ],
        "zones": [
            {
                "id": z.id,
                "agg": {
                    "kind": z.agg.kind,
                    "window": z.agg.window,
                    "expr": _mexpr_to_dict(z.agg.expr),
                },
                "cmp": z.cmp,
                "literal": z.literal.text,
            }
            for z in program.zones
        ],
        "actions": [
            {
                "from": a.from_zone,
                "to": a.to_zone,
                "notify": {"dest": a.notify.dest, "payload": _payload_to_list(a.notify)},
            }
            for a in program.actions
        ],
    }


def program_to_json(program: MeasureProgram, indent: int = 2) -> str:
    return json.dumps(program_to_dict(program), indent=indent)


def _dict_to_xml(parent: ET.Element, data) -> None:
    if isinstance(data, dict):
        for key, value in data.items():
            child = ET.SubElement(parent, key)
            _dict_to_xml(child, value)
    elif isinstance(data, list):
        for value in data:
            child = ET.SubElement(parent, "item")
            _dict_to_xml(child, value)
    else:
        parent.text = "" if data is None else str(data)


def program_to_xml(program: MeasureProgram) -> str:
    root = ET.Element("program")
    _dict_to_xml(root, program_to_dict(program))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")
