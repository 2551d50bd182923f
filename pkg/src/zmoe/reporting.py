"""Report emission: delimited output plus rendered figures.

Reports serialize with stable field ordering so identical runs produce
byte-identical files.  The figure renderer saves PNGs next to the
delimited output; it uses the Agg backend and never opens a window.
"""

from __future__ import annotations

import csv
import io
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .simulation import SimulationReport  # noqa: E402

FORMATS = ("json", "csv", "md")


def report_json(report: SimulationReport) -> str:
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"


def report_csv(report: SimulationReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "layer",
            "step",
            "makespan",
            "sequential_seconds",
            "overlap_ratio",
            "charge_seconds",
            "io_busy_seconds",
            "hits_F",
            "hits_C",
            "hits_S",
            "hits_E",
            "hits_M",
            "mixed_queue",
        ]
    )
    for s in report.steps:
        writer.writerow(
            [
                s.layer,
                s.step,
                repr(s.makespan),
                repr(s.sequential_seconds),
                repr(s.overlap_ratio),
                repr(s.charge_seconds),
                repr(s.io_busy_seconds),
                s.hits.get("F", 0),
                s.hits.get("C", 0),
                s.hits.get("S", 0),
                s.hits.get("E", 0),
                s.hits.get("M", 0),
                int(s.mixed_queue),
            ]
        )
    return buf.getvalue()


def report_md(report: SimulationReport) -> str:
    summary = report.summary()
    lines = [
        "# Simulation report",
        "",
        f"Steps simulated: {summary['steps']}",
        f"Evictions: {summary['evictions']}",
        "",
        "## Makespan percentiles (seconds)",
        "",
        "| metric | value |",
        "| --- | --- |",
    ]
    for key in (
        "mean_makespan",
        "p50_makespan",
        "p90_makespan",
        "p99_makespan",
        "max_makespan",
        "mean_overlap_ratio",
        "io_busy_fraction",
        "charge_total",
    ):
        lines.append(f"| {key} | {summary[key]:.6f} |")
    lines += ["", "## Cache hits by pool", "", "| pool | hits |", "| --- | --- |"]
    for pool, hits in sorted(summary["hit_histogram"].items()):
        lines.append(f"| {pool} | {hits} |")
    lines.append("")
    lines.append("```json")
    lines.append(json.dumps(report.config, indent=2, sort_keys=True))
    lines.append("```")
    lines.append("")
    return "\n".join(lines)


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["plan", "eviction", "mean_latency", "p99_latency",
         "throughput_tokens_per_s", "evictions"]
    )
    for row in rows:
        writer.writerow(
            [
                row["plan"],
                row["eviction"],
                repr(row["mean_latency"]),
                repr(row["p99_latency"]),
                repr(row["throughput_tokens_per_s"]),
                row["evictions"],
            ]
        )
    return buf.getvalue()


def render_figures(report: SimulationReport, out_dir: str, stem: str) -> list[str]:
    """Render makespan and cache-hit figures next to the report."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    makespans = report.makespans
    steps = range(len(makespans))

    fig, ax = plt.subplots(figsize=(8, 3.2))
    ax.plot(steps, makespans, lw=0.8, color="#2462ab")
    ax.set_xlabel("step")
    ax.set_ylabel("makespan (s)")
    ax.set_title("Per-step layer makespan")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{stem}_makespan.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(makespans, bins=min(40, max(5, len(makespans) // 10)), color="#2462ab")
    for q, style in ((50, ":"), (90, "--"), (99, "-.")):
        ax.axvline(report.percentile(q), color="#b2182b", ls=style, lw=1,
                   label=f"p{q}")
    ax.set_xlabel("makespan (s)")
    ax.set_ylabel("steps")
    ax.set_title("Makespan distribution")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, f"{stem}_makespan_hist.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    hist = report.summary()["hit_histogram"]
    pools = ["F", "C", "S", "E", "M"]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(pools, [hist[p] for p in pools], color="#2462ab")
    ax.set_xlabel("pool")
    ax.set_ylabel("activations")
    ax.set_title("Cache state at activation")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{stem}_hits.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths


def write_report(
    report: SimulationReport, path: str, fmt: str = "json", figures: bool = True
) -> list[str]:
    """Write the report in ``fmt`` and render figures alongside it.

    Returns every path written, report first.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    if fmt == "json":
        content = report_json(report)
    elif fmt == "csv":
        content = report_csv(report)
    else:
        content = report_md(report)
    with open(path, "w") as fh:
        fh.write(content)
    written = [path]
    if figures:
        out_dir = os.path.dirname(os.path.abspath(path))
        stem = os.path.splitext(os.path.basename(path))[0]
        written += render_figures(report, out_dir, stem)
    return written
