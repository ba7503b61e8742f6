"""Monitoring DSL: measurement/zone/action programs, decomposition
rewriting, and the executable aggregation plan."""

from .ast import (
    ActionDecl,
    AggExpr,
    BinOp,
    Combine,
    Identifier,
    Literal,
    MeasureProgram,
    MeasurementDecl,
    MRef,
    Notify,
    PayloadExpr,
    PayloadString,
    ZoneDecl,
    pretty_print,
    program_to_json,
    program_to_xml,
)
from .errors import (
    DuplicateId,
    EmptyBuffer,
    MeasureError,
    MeasureSyntaxError,
    UnboundMeasurement,
    UnitMismatch,
    UnknownMeasurement,
    UnknownReference,
    UnsupportedCombiner,
)
from .parser import parse
from .plan import AggregationPlan, Notification, compile_program, window_aggregate
from .rewrite import Parallel, Serial, rewrite_for_decomposition

__all__ = [
    "ActionDecl",
    "AggExpr",
    "AggregationPlan",
    "BinOp",
    "Combine",
    "DuplicateId",
    "EmptyBuffer",
    "Identifier",
    "Literal",
    "MRef",
    "MeasureError",
    "MeasureProgram",
    "MeasureSyntaxError",
    "MeasurementDecl",
    "Notification",
    "Notify",
    "Parallel",
    "PayloadExpr",
    "PayloadString",
    "Serial",
    "UnboundMeasurement",
    "UnitMismatch",
    "UnknownMeasurement",
    "UnknownReference",
    "UnsupportedCombiner",
    "ZoneDecl",
    "compile_program",
    "parse",
    "pretty_print",
    "program_to_json",
    "program_to_xml",
    "rewrite_for_decomposition",
    "window_aggregate",
]
