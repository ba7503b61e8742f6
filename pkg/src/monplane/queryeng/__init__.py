"""Recursive Datalog-subset engine over service-graph facts, with
function-call escapes into the embedded metrics store."""

from .datalog import (
    Atom,
    Constant,
    DatalogError,
    FnCall,
    ParseError,
    Rule,
    Term,
    UnsafeRule,
    Variable,
    parse_atom,
    parse_facts,
    parse_rules,
)
from .engine import (
    CyclicSub,
    EvaluationError,
    FnContext,
    GraphStore,
    NonStratifiedFnCall,
    UnknownNode,
    UnknownPredicate,
    builtin_is_leaf,
    evaluate,
    load_graph,
)
from .functions import (
    AmbiguousEndpoint,
    NoComputeLeaves,
    NoLeafPath,
    fn_average_cpu,
    fn_e2e_delay,
    fn_h2h_delay,
    fn_max_cpu,
)
from .library import load_core_rules
from .metrics import MetricPoint, MetricsStore, NoMetricData, UnknownMetric

__all__ = [
    "AmbiguousEndpoint",
    "Atom",
    "Constant",
    "CyclicSub",
    "DatalogError",
    "EvaluationError",
    "FnCall",
    "FnContext",
    "GraphStore",
    "MetricPoint",
    "MetricsStore",
    "NoComputeLeaves",
    "NoLeafPath",
    "NoMetricData",
    "NonStratifiedFnCall",
    "ParseError",
    "Rule",
    "Term",
    "UnknownMetric",
    "UnknownNode",
    "UnknownPredicate",
    "UnsafeRule",
    "Variable",
    "builtin_is_leaf",
    "evaluate",
    "fn_average_cpu",
    "fn_e2e_delay",
    "fn_h2h_delay",
    "fn_max_cpu",
    "load_core_rules",
    "load_graph",
    "parse_atom",
    "parse_facts",
    "parse_rules",
]
