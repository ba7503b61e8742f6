"""Umbrella command line: broker, aggpoint, ratemon, pathsim, query,
bench, and demo subcommands.

Every networked subcommand honors DD_BROKER (endpoint URL) and DD_NAME
(client identity) from the environment.
"""

from __future__ import annotations

import csv
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

import click

from . import bench as bench_mod
from . import client as ddclient
from . import demo as demo_mod
from . import pathmon
from .broker import Broker, BrokerConfig
from .measure import compile_program, parse as parse_measure, program_to_json, program_to_xml
from .measure.aggpoint import AggregationPoint
from .queryeng import (
    MetricsStore,
    evaluate,
    load_core_rules,
    load_graph,
    parse_atom,
    parse_rules,
)
from .queryeng.ingest import MetricsIngestor
from .ratemon import RateMonitor, synthetic_rates

log = logging.getLogger(__name__)

_BROKER_OPT = click.option(
    "--broker",
    envvar="DD_BROKER",
    default="tcp://127.0.0.1:5555",
    show_default=True,
    help="broker endpoint URL",
)


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _wait_for_interrupt() -> None:
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    while not stop.is_set():
        stop.wait(0.5)


@click.group()
@click.option("--log-level", default="info", show_default=True)
def main(log_level: str) -> None:
    """Monitoring-plane toolkit."""
    _setup_logging(log_level)


# ---------------------------------------------------------------------------


@main.command()
@click.option(
    "--listen",
    multiple=True,
    default=("tcp://0.0.0.0:5555",),
    show_default=True,
    help="listen endpoint (repeatable, tcp:// or local://)",
)
@click.option("--parent", default=None, help="parent broker endpoint")
@click.option("--heartbeat-ms", default=2000, show_default=True)
@click.option("--miss-limit", default=3, show_default=True)
@click.option("--stats-topic", default=None, help="publish per-link frame counters here")
def broker(listen, parent, heartbeat_ms, miss_limit, stats_topic) -> None:
    """Run a message broker node."""
    config = BrokerConfig(
        listen=tuple(listen),
        parent=parent,
        heartbeat_s=heartbeat_ms / 1000.0,
        miss_limit=miss_limit,
        stats_topic=stats_topic,
    )
    with Broker(config) as node:
        for ep in node.bound_endpoints:
            click.echo(f"listening on {ep}")
        _wait_for_interrupt()


# ---------------------------------------------------------------------------


@main.command()
@click.option("--program", "program_path", required=True, type=click.Path(exists=True))
@click.option("--bindings", "bindings_path", required=True, type=click.Path(exists=True))
@_BROKER_OPT
@click.option("--name", envvar="DD_NAME", default="agg1", show_default=True)
@click.option("--export", type=click.Choice(["json", "xml"]), default=None,
              help="print the parsed program and exit")
def aggpoint(program_path, bindings_path, broker, name, export) -> None:
    """Run an aggregation point executing a monitoring program."""
    program = parse_measure(Path(program_path).read_text())
    if export == "json":
        click.echo(program_to_json(program))
        return
    if export == "xml":
        click.echo(program_to_xml(program))
        return
    bindings = json.loads(Path(bindings_path).read_text())
    plan = compile_program(program, bindings)
    handle = ddclient.connect(broker, name)
    click.echo(f"aggregation point {name} ready ({len(plan.buffers)} measurements)")
    try:
        AggregationPoint(plan, handle).run()
    finally:
        handle.close()


# ---------------------------------------------------------------------------


@main.command()
@click.option("--entity", required=True)
@click.option("--capacity", required=True, type=float, help="link capacity, bytes/s")
@click.option("--dt-ms", default=300, show_default=True)
@click.option("--report-every", default=10, show_default=True)
@click.option("--threshold", default=0.01, show_default=True)
@click.option("--k", "k_consecutive", default=3, show_default=True)
@_BROKER_OPT
@click.option("--aggregator", default=None, help="identity receiving reports")
@click.option("--trace", "trace_path", type=click.Path(exists=True), default=None,
              help="CSV of byte counts per interval (one per line)")
@click.option("--synthetic-mu", default=None, type=float,
              help="generate lognormal traffic instead of reading a trace")
@click.option("--synthetic-sigma", default=0.5, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def ratemon(entity, capacity, dt_ms, report_every, threshold, k_consecutive, broker,
            aggregator, trace_path, synthetic_mu, synthetic_sigma, seed) -> None:
    """Run a rate monitor over a byte-count source."""
    handle = ddclient.connect(broker, f"mon.{entity}")
    monitor = RateMonitor(
        entity=entity,
        capacity=capacity,
        dt=dt_ms / 1000.0,
        report_every=report_every,
        threshold=threshold,
        k_consecutive=k_consecutive,
        handle=handle,
        aggregator=aggregator,
    )
    try:
        if trace_path is not None:
            counts = [float(line) for line in Path(trace_path).read_text().split()]
            monitor.run(counts)
        else:
            mu = synthetic_mu if synthetic_mu is not None else 13.0
            source = synthetic_rates(mu, synthetic_sigma, monitor.dt, seed)
            for count in source:
                monitor.observe(count)
                time.sleep(monitor.dt)
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()


# ---------------------------------------------------------------------------


def _parse_alpha_grid(text: str) -> list[float]:
    start, stop, step = (float(x) for x in text.split(":"))
    out, value = [], start
    while value <= stop + 1e-9:
        out.append(round(value, 10))
        value += step
    return out


@main.group(invoke_without_command=True)
@click.option("--hops", default=6, show_default=True)
@click.option("--packets", default=100_000, show_default=True)
@click.option("--alpha", default=0.3, show_default=True)
@click.option("--loss", default=0.04, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--gamma-shape", default=2.0, show_default=True)
@click.option("--gamma-scale", default=0.001, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.pass_context
def pathsim(ctx, hops, packets, alpha, loss, seed, gamma_shape, gamma_scale, out_path):
    """Simulate a monitored path and estimate per-link delay/loss."""
    if ctx.invoked_subcommand is not None:
        return
    config = pathmon.SimConfig(
        hops=hops, packets=packets, alpha=alpha, loss=loss,
        gamma_shape=gamma_shape, gamma_scale=gamma_scale, seed=seed,
    )
    samples, truth = pathmon.simulate(config)
    delay = pathmon.estimate_link_delay(samples)
    counter = pathmon.estimate_link_loss(samples, "counter")
    consistency = pathmon.estimate_link_loss(samples, "consistency")
    result = {
        "config": {
            "hops": hops, "packets": packets, "alpha": alpha,
            "loss": loss, "seed": seed,
        },
        "links": [
            {
                "link": d.link,
                "delay_mean": d.delay_mean,
                "delay_var": d.delay_var,
                "delivery_counter": lc.delivery,
                "delivery_consistency": li.delivery,
                "true_delay_mean": float(truth.delay_mean[d.link - 1]),
                "true_delivery": float(truth.delivery[d.link - 1]),
            }
            for d, lc, li in zip(delay, counter, consistency)
        ],
        "measurement_records": samples.meas_total,
    }
    text = json.dumps(result, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
        click.echo(f"wrote {out_path}")
    else:
        click.echo(text)


@pathsim.command()
@click.option("--alphas", default="0.05:0.5:0.05", show_default=True,
              help="start:stop:step grid of measurement fractions")
@click.option("--seeds", default=20, show_default=True)
@click.option("--hops", default=6, show_default=True)
@click.option("--packets", default=30_000, show_default=True)
@click.option("--loss", default=0.04, show_default=True)
@click.option("--csv", "csv_path", required=True, type=click.Path())
@click.option("--plot-dir", type=click.Path(), default=None,
              help="also render RMSE figures into this directory")
def sweep(alphas, seeds, hops, packets, loss, csv_path, plot_dir) -> None:
    """Sweep the measurement fraction over seeded runs; write RMSE rows."""
    base = pathmon.SimConfig(hops=hops, packets=packets, loss=loss)
    rows = pathmon.run_sweep(_parse_alpha_grid(alphas), range(seeds), base)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["alpha", "link", "rmse_delay_mean", "rmse_delay_var",
             "rmse_loss_counter", "rmse_loss_consistency", "seeds"]
        )
        for r in rows:
            writer.writerow(
                [r.alpha, r.link, r.rmse_delay_mean, r.rmse_delay_var,
                 r.rmse_loss_counter, r.rmse_loss_consistency, r.seeds]
            )
    click.echo(f"wrote {csv_path} ({len(rows)} rows)")
    if plot_dir:
        from . import figures

        delay_png = figures.sweep_delay_figure(rows, Path(plot_dir) / "sweep_delay_rmse.png")
        loss_png = figures.sweep_loss_figure(rows, Path(plot_dir) / "sweep_loss_rmse.png")
        click.echo(f"wrote {delay_png}")
        click.echo(f"wrote {loss_png}")


# ---------------------------------------------------------------------------


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--rules", "rules_path", type=click.Path(exists=True), default=None,
              help="extra rule file loaded after the core library")
@click.option("--rules-dir", type=click.Path(exists=True), default=None,
              help="directory of .dl files loaded after the core library")
@click.option("--metrics", "metrics_path", type=click.Path(), default=None,
              help="ndjson metrics database")
@click.argument("command", nargs=-1, required=True)
def query(graph_path, rules_path, rules_dir, metrics_path, command) -> None:
    """Evaluate a query: either `pred arg1 arg2 ...` or a full atom like
    'child(nf1, X)'."""
    store = load_graph(Path(graph_path).read_text())
    rules = load_core_rules()
    if rules_path:
        rules.extend(parse_rules(Path(rules_path).read_text()))
    if rules_dir:
        from .queryeng.library import load_rule_directory

        rules.extend(load_rule_directory(rules_dir))
    metrics = MetricsStore(metrics_path) if metrics_path else MetricsStore()
    text = " ".join(command)
    if "(" in text:
        atom = parse_atom(text)
    else:
        # command form `pred arg1 arg2`: pad to the predicate's arity with
        # fresh variables (the metric commands e.g. gain a result variable)
        parts = text.split()
        pred, args = parts[0], parts[1:]
        arities = {r.head.predicate: len(r.head.terms) for r in rules}
        arities.update({p: len(next(iter(rows))) for p, rows in store.facts.items()})
        arity = max(arities.get(pred, len(args)), len(args))
        terms = ", ".join(args + [f"V{i}" for i in range(arity - len(args))])
        atom = parse_atom(f"{pred}({terms})")
    rows = evaluate(store, rules, atom, metrics=metrics)
    for row in sorted(rows):
        click.echo("\t".join(row))
    if not rows:
        click.echo("(no results)", err=True)


# ---------------------------------------------------------------------------


@main.command("bench")
@_BROKER_OPT
@click.option("--size", "sizes", multiple=True, type=int, default=(100,),
              show_default=True, help="payload size in bytes (repeatable)")
@click.option("--duration", default=5.0, show_default=True)
@click.option("--spawn-broker/--no-spawn-broker", default=False,
              help="run against a freshly spawned local broker")
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--plot", "plot_path", type=click.Path(), default=None)
def bench_cmd(broker, sizes, duration, spawn_broker, out_path, plot_path) -> None:
    """Throughput/latency benchmark through one broker."""
    own = None
    endpoint = broker
    if spawn_broker:
        own = Broker(BrokerConfig(listen=("tcp://127.0.0.1:0",), heartbeat_s=30.0))
        own.start()
        endpoint = str(own.bound_endpoints[0])
    try:
        reports = []
        for size in sizes:
            report = bench_mod.bench_broker(endpoint, payload_bytes=size, duration_s=duration)
            reports.append(report.to_dict())
            click.echo(
                f"{size} B: {report.msgs_per_s:,.0f} msg/s, "
                f"{report.goodput_bytes_per_s / 1e6:.2f} MB/s goodput"
            )
        if out_path:
            Path(out_path).write_text(json.dumps(reports, indent=2) + "\n")
            click.echo(f"wrote {out_path}")
        if plot_path:
            from . import figures

            figures.bench_figure(reports, plot_path)
            click.echo(f"wrote {plot_path}")
    finally:
        if own is not None:
            own.stop()


# ---------------------------------------------------------------------------


@main.command("demo")
@click.option("--seed", default=1, show_default=True)
@click.option("--trace", "trace_path", type=click.Path(), default=None)
@click.option("--calm", is_flag=True, help="traffic scaled to 10%: no overload")
@click.option("--buggy/--no-buggy", default=True, show_default=True,
              help="balancer ignores pin policy (the guard catches it)")
@click.option("--broker", envvar="DD_BROKER", default=None,
              help="existing broker endpoint (spawns one when omitted)")
def demo_cmd(seed, trace_path, calm, buggy, broker) -> None:
    """Run the integrated two-link three-flow scenario."""
    scenario = demo_mod.DemoScenario(
        seed=seed,
        intensity=0.1 if calm else 1.0,
        buggy_balancer=buggy,
        broker=broker,
    )
    result = demo_mod.run_demo(scenario)
    text = demo_mod.trace_to_ndjson(result.trace)
    if trace_path:
        Path(trace_path).write_text(text)
        click.echo(f"wrote {trace_path} ({len(result.trace)} events)")
    else:
        click.echo(text, nl=False)
    click.echo(
        f"assignments: {result.assignments}; alarms: {len(result.events('alarm'))}; "
        f"invariant violations: {len(result.violations)}"
    )
    for violation in result.violations:
        click.echo(f"VIOLATION: {violation}", err=True)
    if violations := result.violations:
        raise SystemExit(1)


# ---------------------------------------------------------------------------


@main.command("ingest")
@_BROKER_OPT
@click.option("--name", envvar="DD_NAME", default="metrics-ingest", show_default=True)
@click.option("--metrics", "metrics_path", required=True, type=click.Path())
def ingest(broker, name, metrics_path) -> None:
    """Subscribe to monitor report topics and persist them as metrics."""
    handle = ddclient.connect(broker, name)
    store = MetricsStore(metrics_path)
    click.echo(f"ingesting rate.* and path.* into {metrics_path}")
    try:
        MetricsIngestor(handle, store).run()
    finally:
        handle.close()
        store.close()


if __name__ == "__main__":
    main()
