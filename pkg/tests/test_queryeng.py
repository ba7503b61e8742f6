import itertools
import random
from pathlib import Path

import pytest

from monplane.queryeng import (
    AmbiguousEndpoint,
    Atom,
    Constant,
    CyclicSub,
    MetricPoint,
    MetricsStore,
    NoComputeLeaves,
    NoLeafPath,
    NoMetricData,
    NonStratifiedFnCall,
    ParseError,
    UnknownMetric,
    UnknownNode,
    UnknownPredicate,
    UnsafeRule,
    Variable,
    builtin_is_leaf,
    evaluate,
    fn_average_cpu,
    fn_e2e_delay,
    fn_h2h_delay,
    fn_max_cpu,
    load_core_rules,
    load_graph,
    parse_atom,
    parse_facts,
    parse_rules,
)
from monplane.queryeng.engine import FnContext, _saturate

DATA = Path(__file__).parent / "data"
FIXTURE = (DATA / "service_graph.facts").read_text()


@pytest.fixture
def store():
    return load_graph(FIXTURE)


@pytest.fixture
def metrics():
    m = MetricsStore()
    m.put(MetricPoint("delay", {"src": "vm7", "dst": "vm10"}, ts=1.0, value=0.004))
    for hop, ms in ((("vm7", "vm8"), 0.001), (("vm8", "vm9"), 0.002), (("vm9", "vm10"), 0.001)):
        m.put(MetricPoint("delay", {"src": hop[0], "dst": hop[1]}, ts=1.0, value=ms))
    for i, (vm, cpu) in enumerate(
        [("vm1", 10.0), ("vm2", 20.0), ("vm3", 30.0), ("vm7", 40.0), ("vm8", 50.0)]
    ):
        m.put(MetricPoint("cpu", {"entity": vm}, ts=float(i), value=cpu, unit="%"))
    return m


# ---------------------------------------------------------------------------
# facts and store


def test_single_fact_store():
    store = load_graph("sub(a,b)")
    assert store.rows("sub") == {("a", "b")}


def test_cyclic_sub_rejected():
    with pytest.raises(CyclicSub):
        load_graph("sub(a,b)\nsub(b,a)")


def test_fact_parse_errors():
    with pytest.raises(ParseError):
        parse_facts("frob(a,b)")
    with pytest.raises(ParseError):
        parse_facts("sub(a,X)")


def test_role_aliases_accepted():
    store = load_graph("sub(a,b)\nis_source(b)\nis_dst(b)")
    assert store.rows("is_ingress") == {("b",)}
    assert store.rows("is_egress") == {("b",)}


def test_fixture_loads_with_expected_leaves(store):
    rules = load_core_rules()
    leaves = evaluate(store, rules, parse_atom("all_Leaf(nf1, Y)"))
    assert {row[1] for row in leaves} == {"vm1", "vm2", "vm3", "vm7", "vm8"}


def test_kvp_view(store):
    kvp = store.as_kvp()
    assert ("kvp", "sub", "nf1", "vnf1_1") in kvp
    assert ("kvp", "link", "nf1", "nf2") in kvp


# ---------------------------------------------------------------------------
# rule parsing


def test_recursive_rule_parses():
    (rule,) = parse_rules("R1: child(X,Y) <= sub(X,Z), child(Z,Y)")
    assert rule.id == "R1"
    assert rule.head.predicate == "child"
    assert [a.predicate for a in rule.relational_atoms] == ["sub", "child"]


def test_unsafe_rule_rejected():
    with pytest.raises(UnsafeRule):
        parse_rules("bad(X) <= link(a,b)")


def test_fn_escape_rule_parses():
    (rule,) = parse_rules("R5: average_cpu(X) <= fn_average_cpu(all_compute(nf, Y))")
    (call,) = rule.fn_calls
    assert call.fn == "fn_average_cpu"
    assert call.result_var is None
    assert isinstance(call.args[0], Atom)


def test_fn_with_explicit_result_var():
    (rule,) = parse_rules("R6: e2e_delay(S,D,P) <= link(S,D), P == fn_e2e_delay(S, D)")
    (call,) = rule.fn_calls
    assert call.result_var == "P"
    assert call.args == (Variable("S"), Variable("D"))


def test_uppercase_predicate_normalized():
    (rule,) = parse_rules("R6: e2e_delay(S,D,P) <= Link(S,D), P == fn_e2e_delay(S, D)")
    assert rule.relational_atoms[0].predicate == "link"


# ---------------------------------------------------------------------------
# evaluation


CHILD_RULES = parse_rules(
    """
    R1: child(X,Y) <= sub(X,Z), child(Z,Y)
    R2: child(X,Y) <= sub(X,Y)
    """
)


def test_transitive_closure_small():
    store = load_graph("sub(a,b)\nsub(b,c)")
    rows = evaluate(store, CHILD_RULES, parse_atom("child(X, Y)"))
    assert rows == {("a", "b"), ("b", "c"), ("a", "c")}


def test_base_case_single_fact():
    store = load_graph("sub(a,b)")
    assert evaluate(store, CHILD_RULES, parse_atom("child(X, Y)")) == {("a", "b")}


def test_query_with_constant_restricts_rows():
    store = load_graph("sub(a,b)\nsub(b,c)\nsub(z,b)")
    rows = evaluate(store, CHILD_RULES, parse_atom("child(a, Y)"))
    assert rows == {("a", "b"), ("a", "c")}


def test_unknown_predicate():
    store = load_graph("sub(a,b)")
    with pytest.raises(UnknownPredicate):
        evaluate(store, CHILD_RULES, parse_atom("parent(X, Y)"))


def test_non_stratified_fn_rule_rejected():
    rules = parse_rules(
        """
        scored(X,P) <= node(X), P == fn_average_cpu(X)
        bad(X) <= scored(X, P)
        """
    )
    with pytest.raises(NonStratifiedFnCall):
        evaluate(load_graph("node(a)"), rules, parse_atom("bad(X)"))


def naive_closure(edges):
    """Brute-force oracle: iterate the child rules to a fixed point."""
    closure = set(edges)
    while True:
        extra = {(x, w) for (x, y) in edges for (z, w) in closure if z == y}
        if extra <= closure:
            return closure
        closure |= extra


def test_fixpoint_matches_naive_oracle_on_random_graphs():
    rng = random.Random(33)
    for round_no in range(50):
        n = rng.randint(2, 30)
        nodes = [f"n{i}" for i in range(n)]
        edges = set()
        for i in range(n):
            for j in range(i + 1, n):  # i -> j only: guarantees acyclicity
                if rng.random() < 0.15:
                    edges.add((nodes[i], nodes[j]))
        facts = "\n".join(f"sub({a},{b})" for a, b in sorted(edges))
        store = load_graph(facts)
        got = evaluate(store, CHILD_RULES, parse_atom("child(X, Y)"))
        assert got == naive_closure(edges), f"round {round_no}"


def test_rule_order_independence():
    store = load_graph("sub(a,b)\nsub(b,c)\nsub(c,d)")
    reference = None
    for perm in itertools.permutations(CHILD_RULES):
        rows = evaluate(store, list(perm), parse_atom("child(X, Y)"))
        if reference is None:
            reference = rows
        assert rows == reference


def test_monotonicity_adding_facts():
    base = "sub(a,b)\nsub(b,c)"
    before = evaluate(load_graph(base), CHILD_RULES, parse_atom("child(X, Y)"))
    after = evaluate(
        load_graph(base + "\nsub(c,d)"), CHILD_RULES, parse_atom("child(X, Y)")
    )
    assert before <= after


# ---------------------------------------------------------------------------
# builtins and fn escapes


def test_is_leaf_on_fixture(store):
    assert builtin_is_leaf(store, "vm7") is True
    assert builtin_is_leaf(store, "nf1") is False


def test_is_leaf_isolated_node():
    store = load_graph("node(z)")
    assert builtin_is_leaf(store, "z") is True


def test_is_leaf_unknown_node(store):
    with pytest.raises(UnknownNode):
        builtin_is_leaf(store, "vm99")


def _ctx(store, metrics):
    return FnContext(store=store, metrics=metrics, facts=dict(store.facts))


def test_e2e_delay_resolves_endpoints(store, metrics):
    assert fn_e2e_delay(_ctx(store, metrics), "nf1", "nf2") == pytest.approx(0.004)


def test_e2e_delay_missing_metric(store):
    empty = MetricsStore()
    with pytest.raises((NoMetricData, UnknownMetric)):
        fn_e2e_delay(_ctx(store, empty), "nf1", "nf2")


def test_e2e_delay_ambiguous_ingress(metrics):
    facts = FIXTURE + "\nis_ingress(vm8)\n"
    store = load_graph(facts)
    with pytest.raises(AmbiguousEndpoint):
        fn_e2e_delay(_ctx(store, metrics), "nf1", "nf2")


def test_h2h_two_hop_sum():
    facts = """
    sub(s, leaf_in)
    sub(s, mid)
    sub(d, leaf_out)
    is_ingress(leaf_in)
    is_egress(leaf_out)
    link(leaf_in, mid)
    link(mid, leaf_out)
    """
    store = load_graph(facts)
    m = MetricsStore()
    m.put(MetricPoint("delay", {"src": "leaf_in", "dst": "mid"}, ts=0, value=0.002))
    m.put(MetricPoint("delay", {"src": "mid", "dst": "leaf_out"}, ts=0, value=0.003))
    assert fn_h2h_delay(_ctx(store, m), "s", "d") == pytest.approx(0.005)


def test_h2h_single_hop_equals_e2e():
    facts = """
    sub(s, a)
    sub(d, b)
    is_ingress(a)
    is_egress(b)
    link(a, b)
    """
    store = load_graph(facts)
    m = MetricsStore()
    m.put(MetricPoint("delay", {"src": "a", "dst": "b"}, ts=0, value=0.007))
    ctx = _ctx(store, m)
    assert fn_h2h_delay(ctx, "s", "d") == fn_e2e_delay(ctx, "s", "d")


def test_h2h_broken_chain(store, metrics):
    facts = FIXTURE.replace("link(vm8, vm9)", "")
    broken = load_graph(facts)
    with pytest.raises(NoLeafPath):
        fn_h2h_delay(_ctx(broken, metrics), "nf1", "nf2")


def test_cpu_aggregates(store, metrics):
    ctx = _ctx(store, metrics)
    assert fn_average_cpu(ctx, "nf1") == pytest.approx(30.0)
    assert fn_max_cpu(ctx, "nf1") == pytest.approx(50.0)


def test_cpu_single_leaf():
    store = load_graph("sub(nf, c1)\nis_compute(c1)")
    m = MetricsStore()
    m.put(MetricPoint("cpu", {"entity": "c1"}, ts=0, value=12.5))
    ctx = _ctx(store, m)
    assert fn_average_cpu(ctx, "nf") == fn_max_cpu(ctx, "nf") == pytest.approx(12.5)


def test_cpu_no_compute_leaves(store, metrics):
    with pytest.raises(NoComputeLeaves):
        fn_average_cpu(_ctx(store, metrics), "nf2")


def test_full_query_through_rules(store, metrics):
    rules = load_core_rules()
    rows = evaluate(store, rules, parse_atom("e2e_delay(nf1, nf2, P)"), metrics=metrics)
    assert rows == {("nf1", "nf2", "0.004")}
    rows = evaluate(store, rules, parse_atom("leaf_src(nf1, Y)"), metrics=metrics)
    assert rows == {("nf1", "vm7")}
    rows = evaluate(store, rules, parse_atom("leaf_dst(nf2, Y)"), metrics=metrics)
    assert rows == {("nf2", "vm10")}


def test_paper_style_bare_fn_rule(store, metrics):
    rules = load_core_rules() + parse_rules(
        "R11: nf1_cpu(X) <= fn_average_cpu(all_compute(nf1, Y))"
    )
    rows = evaluate(store, rules, parse_atom("nf1_cpu(X)"), metrics=metrics)
    assert rows == {("30.0",)}


# ---------------------------------------------------------------------------
# metrics store


def test_metrics_mean_over_window():
    m = MetricsStore()
    for ts, v in enumerate((1.0, 2.0, 3.0)):
        m.put(MetricPoint("x", {"k": "v"}, ts=float(ts), value=v))
    assert m.query("x", {"k": "v"}, agg="mean") == pytest.approx(2.0)


def test_metrics_latest():
    m = MetricsStore()
    m.put(MetricPoint("x", {}, ts=1.0, value=5.0))
    m.put(MetricPoint("x", {}, ts=2.0, value=7.0))
    assert m.query("x", {}, agg="latest") == pytest.approx(7.0)


def test_metrics_upsert_by_key():
    m = MetricsStore()
    m.put(MetricPoint("x", {}, ts=1.0, value=5.0))
    m.put(MetricPoint("x", {}, ts=1.0, value=9.0))
    assert m.query("x", {}, agg="latest") == pytest.approx(9.0)
    assert len(m.series("x")) == 1


def test_metrics_strict_flag():
    m = MetricsStore()
    m.put(MetricPoint("x", {"k": "v"}, ts=1.0, value=5.0))
    with pytest.raises(UnknownMetric):
        m.query("nope", {})
    with pytest.raises(NoMetricData):
        m.query("x", {"k": "other"})
    assert m.query("x", {"k": "other"}, strict=False) is None


def test_metrics_window_filter():
    m = MetricsStore()
    for ts in (0.0, 30.0, 100.0):
        m.put(MetricPoint("x", {}, ts=ts, value=ts))
    # window measured back from the newest matching point (ts=100)
    assert m.query("x", {}, window_s=60.0, agg="mean") == pytest.approx(100.0)
    assert m.query("x", {}, window_s=None, agg="mean") == pytest.approx(130.0 / 3)


def test_metrics_ndjson_round_trip(tmp_path):
    path = tmp_path / "db.ndjson"
    with MetricsStore(path) as m:
        m.put(MetricPoint("delay", {"src": "a", "dst": "b"}, ts=1.0, value=0.004, unit="s"))
        m.put(MetricPoint("delay", {"src": "a", "dst": "b"}, ts=1.0, value=0.005, unit="s"))
    with MetricsStore(path) as again:
        assert again.query("delay", {"src": "a", "dst": "b"}, agg="latest") == 0.005
        assert len(again.series("delay")) == 1
