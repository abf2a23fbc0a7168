"""PNG figures written next to the CSV outputs (headless Agg backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import ComparisonRow  # noqa: E402


def read_metrics(path: str | Path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def plot_training_curves(metrics_csv: str | Path, out_png: str | Path, title: str = "") -> Path:
    """Mean return on top, outcome rates below, both against update index."""
    m = read_metrics(metrics_csv)
    fig, (ax_r, ax_p) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    if m:
        u = m["update"]
        ax_r.plot(u, m["mean_return"], color="tab:blue")
        ax_p.plot(u, m["success_rate"], label="success", color="tab:green")
        ax_p.plot(u, m["collision_rate"], label="collision", color="tab:red")
        ax_p.plot(u, m["timeout_rate"], label="timeout", color="tab:gray")
        ax_p.legend(loc="center right")
    ax_r.set_ylabel("mean episode return")
    ax_p.set_ylabel("fraction of episodes")
    ax_p.set_xlabel("update")
    ax_p.set_ylim(-0.02, 1.02)
    if title:
        ax_r.set_title(title)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_comparison(rows: list[ComparisonRow], out_png: str | Path) -> Path:
    """Grouped bars of success and collision rate per (scenario, network, noise)."""
    labels = [f"{r.scenario}\n{r.network}\nσ={r.noise_stddev:g}" for r in rows]
    xs = range(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(5.0, 1.3 * len(rows)), 4))
    ax.bar([x - width / 2 for x in xs], [100 * r.success_rate for r in rows], width,
           label="success", color="tab:green")
    ax.bar([x + width / 2 for x in xs], [100 * r.collision_rate for r in rows], width,
           label="collision", color="tab:red")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.legend()
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
