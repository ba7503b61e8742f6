"""Function-call escapes resolving service-level queries to stored metrics.

Each function receives the evaluation context (graph store, saturated
fixpoint, metrics store) with already-ground arguments. Endpoint
resolution descends the decomposition relation to leaves and picks the
node carrying the matching role fact.
"""

from __future__ import annotations

import collections
from typing import Optional

from .datalog import DatalogError
from .engine import FnContext, GraphStore
from .metrics import NoMetricData


class FnError(DatalogError):
    pass


class AmbiguousEndpoint(FnError):
    """Endpoint resolution must yield exactly one leaf."""


class NoLeafPath(FnError):
    pass


class NoComputeLeaves(FnError):
    pass


def descendants(store: GraphStore, root: str) -> set[str]:
    out: set[str] = set()
    frontier = [root]
    while frontier:
        node = frontier.pop()
        for row in store.rows_with_first("sub", node):
            child = row[1]
            if child not in out:
                out.add(child)
                frontier.append(child)
    return out


def leaves_of(store: GraphStore, root: str) -> set[str]:
    return {d for d in descendants(store, root) if not store.has_children(d)}


def _role_leaves(store: GraphStore, root: str, role: str) -> set[str]:
    tagged = {row[0] for row in store.rows(role)}
    return leaves_of(store, root) & tagged


def _single_endpoint(store: GraphStore, nf: str, role: str) -> str:
    found = _role_leaves(store, nf, role)
    if len(found) != 1:
        raise AmbiguousEndpoint(
            f"{nf} resolves to {sorted(found) or 'no'} {role} leaves; need exactly one"
        )
    return next(iter(found))


def resolve_endpoints(store: GraphStore, src_nf: str, dst_nf: str) -> tuple[str, str]:
    """(ingress leaf of src, egress leaf of dst)."""
    return (
        _single_endpoint(store, src_nf, "is_ingress"),
        _single_endpoint(store, dst_nf, "is_egress"),
    )


def _require_metrics(ctx: FnContext):
    if ctx.metrics is None:
        raise NoMetricData("no metrics store attached")
    return ctx.metrics


def fn_e2e_delay(ctx: FnContext, src_nf: str, dst_nf: str) -> float:
    """End-to-end delay between two functions: resolved to their leaf
    endpoints, then read from the stored delay series (window mean)."""
    ingress, egress = resolve_endpoints(ctx.store, src_nf, dst_nf)
    metrics = _require_metrics(ctx)
    value = metrics.query("delay", {"src": ingress, "dst": egress}, agg="mean")
    return float(value)


def _leaf_path(store: GraphStore, start: str, goal: str) -> list[str]:
    """Shortest chain of link facts between two leaves."""
    parents: dict[str, Optional[str]] = {start: None}
    queue = collections.deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            path = [node]
            while parents[node] is not None:
                node = parents[node]
                path.append(node)
            return list(reversed(path))
        for row in store.rows_with_first("link", node):
            nxt = row[1]
            if nxt not in parents:
                parents[nxt] = node
                queue.append(nxt)
    raise NoLeafPath(f"no link chain from {start} to {goal}")


def fn_h2h_delay(ctx: FnContext, src_nf: str, dst_nf: str) -> float:
    """Hop-by-hop delay: per-segment delay summed along the leaf-level
    link path between the resolved endpoints."""
    ingress, egress = resolve_endpoints(ctx.store, src_nf, dst_nf)
    path = _leaf_path(ctx.store, ingress, egress)
    metrics = _require_metrics(ctx)
    total = 0.0
    for src, dst in zip(path, path[1:]):
        total += float(metrics.query("delay", {"src": src, "dst": dst}, agg="mean"))
    return total


def _compute_usages(ctx: FnContext, nf) -> list[float]:
    """CPU readings for the compute leaves of `nf`; a nested-atom argument
    (already a tuple of node names) is used as the compute set directly."""
    if isinstance(nf, tuple):
        compute = set(nf)
    else:
        compute = _role_leaves(ctx.store, nf, "is_compute")
    if not compute:
        raise NoComputeLeaves(str(nf))
    metrics = _require_metrics(ctx)
    return [
        float(metrics.query("cpu", {"entity": leaf}, agg="latest"))
        for leaf in sorted(compute)
    ]


def fn_average_cpu(ctx: FnContext, nf) -> float:
    usages = _compute_usages(ctx, nf)
    return sum(usages) / len(usages)


def fn_max_cpu(ctx: FnContext, nf) -> float:
    return max(_compute_usages(ctx, nf))


FN_REGISTRY = {
    "fn_e2e_delay": fn_e2e_delay,
    "fn_h2h_delay": fn_h2h_delay,
    "fn_average_cpu": fn_average_cpu,
    "fn_max_cpu": fn_max_cpu,
}
