"""Figure rendering for the report paths (sweep results, bench results).

Figures are written to files next to the delimited output; no interactive
backend is ever required.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

plt.rcParams.update(
    {
        "figure.figsize": (6.4, 4.0),
        "figure.dpi": 110,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.labelsize": 10,
        "font.size": 10,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
    }
)


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def sweep_delay_figure(rows: Sequence, path) -> Path:
    """Per-link RMSE of the estimated link-delay mean vs measurement
    fraction (one line per link)."""
    fig, ax = plt.subplots()
    links = sorted({r.link for r in rows})
    for link in links:
        pts = sorted((r.alpha, r.rmse_delay_mean) for r in rows if r.link == link)
        ax.plot(*zip(*pts), marker="o", label=f"link {link}")
    ax.set_xlabel("measurement fraction")
    ax.set_ylabel("RMSE of link delay mean (s)")
    ax.set_yscale("log")
    ax.legend()
    return save(fig, path)


def sweep_loss_figure(rows: Sequence, path) -> Path:
    """Loss-model RMSE vs measurement fraction for both estimation
    strategies, averaged over links."""
    fig, ax = plt.subplots()
    alphas = sorted({r.alpha for r in rows})
    for attr, label in (
        ("rmse_loss_counter", "counter-based"),
        ("rmse_loss_consistency", "consistency-based"),
    ):
        ys = []
        for alpha in alphas:
            vals = [getattr(r, attr) for r in rows if r.alpha == alpha]
            ys.append(sum(vals) / len(vals))
        ax.plot(alphas, ys, marker="o", label=label)
    ax.set_xlabel("measurement fraction")
    ax.set_ylabel("RMSE of per-link delivery ratio")
    ax.set_yscale("log")
    ax.legend()
    return save(fig, path)


def bench_figure(reports: Sequence[dict], path) -> Path:
    """Messages/s and goodput against payload size (two y axes)."""
    fig, ax = plt.subplots()
    sizes = [r["payload_bytes"] for r in reports]
    ax.plot(sizes, [r["msgs_per_s"] for r in reports], marker="o", color="tab:blue")
    ax.set_xlabel("payload size (bytes)")
    ax.set_ylabel("messages per second", color="tab:blue")
    ax.set_xscale("log")
    ax.set_yscale("log")
    twin = ax.twinx()
    twin.plot(
        sizes,
        [r["goodput_bytes_per_s"] for r in reports],
        marker="s",
        color="tab:red",
    )
    twin.set_ylabel("goodput (bytes/s)", color="tab:red")
    twin.set_yscale("log")
    return save(fig, path)
