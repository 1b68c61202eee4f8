"""Figure rendering for benchmark outputs.

Every report path writes PNG figures next to its CSV so results are
inspectable without a separate plotting step.  The CSV stays the machine
interface; these are for eyes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .sim import MetricsReport, RatePoint
from .workload import LocalityCurve

_BAR_COLORS = ("#4878a8", "#e49444", "#6aa66a")


def _finish(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_try_trend(report: MetricsReport, out_dir: Path, stem: str = "bench") -> list[Path]:
    """Per-try throughput and mean latency bars for one shared-cache run."""
    tries = [t.try_index for t in report.per_try]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.bar(tries, [t.throughput for t in report.per_try], color=_BAR_COLORS[0])
    ax1.set_xlabel("try")
    ax1.set_ylabel("throughput (queries/s)")
    ax1.set_xticks(tries)
    ax2.bar(tries, [t.latency_mean for t in report.per_try], color=_BAR_COLORS[1])
    ax2.set_xlabel("try")
    ax2.set_ylabel("mean latency (s)")
    ax2.set_xticks(tries)
    out = _finish(fig, out_dir / f"{stem}_try_trend.png")

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(tries, [t.disk_hit_ratio for t in report.per_try], marker="o", color=_BAR_COLORS[2])
    ax.set_xlabel("try")
    ax.set_ylabel("disk hit ratio")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(tries)
    out2 = _finish(fig, out_dir / f"{stem}_hit_ratio.png")
    return [out, out2]


def render_scenario_comparison(
    reports: dict[str, MetricsReport], out_dir: Path, stem: str = "bench"
) -> list[Path]:
    """Throughput and latency side by side for several scenarios."""
    names = list(reports)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.bar(names, [reports[n].throughput for n in names], color=_BAR_COLORS[0])
    ax1.set_ylabel("throughput (queries/s)")
    ax2.bar(names, [reports[n].latency_mean for n in names], color=_BAR_COLORS[1])
    ax2.set_ylabel("mean latency (s)")
    return [_finish(fig, out_dir / f"{stem}_scenarios.png")]


def render_single_breakdown(
    cells: Sequence[dict], out_dir: Path, stem: str = "single"
) -> list[Path]:
    """TTFT decomposition per (model, batch) cell.

    ``cells`` rows need: model, batch_size, cached (bool), ttft_mean,
    kv_load_mean, prefill_mean.
    """
    models = sorted({c["model"] for c in cells})
    batches = sorted({c["batch_size"] for c in cells})
    fig, axes = plt.subplots(1, len(models), figsize=(3.2 * len(models), 3.4), squeeze=False)
    width = 0.38
    for ax, model in zip(axes[0], models):
        for shift, cached in ((-width / 2, False), (width / 2, True)):
            rows = {c["batch_size"]: c for c in cells if c["model"] == model and c["cached"] == cached}
            xs = [i + shift for i in range(len(batches))]
            prefill = [rows[b]["prefill_mean"] for b in batches]
            kv = [rows[b]["kv_load_mean"] for b in batches]
            label = "cached" if cached else "baseline"
            ax.bar(xs, prefill, width, label=f"{label} prefill",
                   color=_BAR_COLORS[1] if cached else _BAR_COLORS[0])
            if cached:
                ax.bar(xs, kv, width, bottom=prefill, label="kv load", color=_BAR_COLORS[2])
        ax.set_xticks(range(len(batches)))
        ax.set_xticklabels(batches)
        ax.set_xlabel("batch size")
        ax.set_title(model, fontsize=9)
    axes[0][0].set_ylabel("TTFT (s)")
    axes[0][-1].legend(fontsize=7)
    return [_finish(fig, out_dir / f"{stem}_ttft_breakdown.png")]


def render_sweep(points: Sequence[RatePoint], out_dir: Path, stem: str = "sweep") -> list[Path]:
    """Stacked latency components against the arrival rate."""
    rates = [p.rate for p in points]
    queue = [p.queue_wait_mean for p in points]
    proc = [p.processing_mean for p in points]
    net = [p.network_mean for p in points]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.stackplot(rates, queue, proc, net,
                 labels=("queue wait", "processing", "network"), colors=_BAR_COLORS)
    ax.set_xlabel("arrival rate (queries/s)")
    ax.set_ylabel("mean latency (s)")
    ax.set_xscale("log", base=2)
    ax.legend(loc="upper left", fontsize=8)
    return [_finish(fig, out_dir / f"{stem}_latency_components.png")]


def render_locality(curve: LocalityCurve, out_dir: Path, stem: str = "locality") -> list[Path]:
    xs = [x for x, _ in curve.points]
    ys = [y for _, y in curve.points]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(xs, ys, color=_BAR_COLORS[0])
    half = curve.coverage_at(0.5)
    ax.axhline(0.5, color="grey", lw=0.8, ls="--")
    ax.axvline(half, color="grey", lw=0.8, ls="--")
    ax.annotate(f"{half:.1%} of docs cover 50% of queries",
                xy=(half, 0.5), xytext=(min(half * 3, 0.45), 0.3), fontsize=8,
                arrowprops={"arrowstyle": "->", "lw": 0.7})
    ax.set_xlabel("fraction of documents (by retrieval frequency)")
    ax.set_ylabel("fraction of queries covered")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    return [_finish(fig, out_dir / f"{stem}_cdf.png")]
