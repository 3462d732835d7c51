"""Report files and figures.

Every run writes machine-readable artifacts (JSON report, per-link traffic
CSV, schedule dump, sweep / convergence / fault CSVs) plus matplotlib
renderings of the same data, so each figure is reproducible offline from the
delimited files alone. Output is byte-stable for identical inputs.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .costmodel import CostReport
from .routing import TrafficMatrix, link_loads
from .streaming import dump_schedule, generate_stream_schedule
from .topology import WaferTopology


def _fmt_seconds(t: float) -> str:
    if t <= 0:
        return "0"
    for unit, scale in (("s", 1.0), ("ms", 1e-3), ("us", 1e-6), ("ns", 1e-9)):
        if t >= scale:
            return f"{t / scale:.3f} {unit}"
    return f"{t:.3e} s"


def summary_text(report: CostReport) -> str:
    """Human-readable summary table."""
    rows = [
        ("strategy (dp,tp,sp,stream)", report.strategy),
        ("step time", _fmt_seconds(report.t_total)),
        ("  compute", _fmt_seconds(report.comp_seconds)),
        ("  p2p streams", _fmt_seconds(report.p2p_seconds)),
        ("  collectives", _fmt_seconds(report.collective_seconds)),
        ("  reshard", _fmt_seconds(report.reshard_seconds)),
        ("memory peak / die", f"{report.memory_peak / 1e9:.2f} GB"
                              + ("  ** OOM **" if report.oom else "")),
        ("d2d traffic", f"{report.traffic_bytes / 1e9:.2f} GB"),
        ("energy / step", f"{report.energy_joules:.2f} J"),
        ("power", f"{report.power_watts / 1e3:.2f} kW"),
        ("throughput", f"{report.throughput_tokens_per_s:.0f} tokens/s"),
        ("tokens / joule", f"{report.tokens_per_joule:.2f}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def write_report(report: CostReport, out_dir: str | Path,
                 basename: str = "report") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{basename}.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    txt_path = out / f"{basename}.txt"
    txt_path.write_text(summary_text(report))
    return [json_path, txt_path]


def write_traffic(plan, out_dir: str | Path, basename: str = "traffic") -> list[Path]:
    """Per-link CSV plus a heatmap figure for the busiest stage/round."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    all_loads: dict = {}
    for oid, ev in sorted(plan.per_op.items()):
        tm = link_loads(ev.route_plan)
        for key, (b, n) in tm.loads.items():
            cur = all_loads.setdefault(key, [0.0, 0])
            cur[0] += b
            cur[1] += n
    merged = TrafficMatrix(loads={k: (v[0], v[1]) for k, v in all_loads.items()})
    csv_path = out / f"{basename}.csv"
    csv_path.write_text(merged.to_csv())
    written.append(csv_path)
    written.append(traffic_heatmap(merged, plan.topology, out / f"{basename}.png"))
    return written


def traffic_heatmap(traffic: TrafficMatrix, topology: WaferTopology,
                    path: Path) -> Path:
    """Per-die total link bytes rendered on the mesh grid."""
    grid = np.zeros((topology.rows, topology.cols))
    for (stage, rnd, (a, b)), (bytes_, n) in traffic.loads.items():
        grid[a[0], a[1]] += bytes_ / 2
        grid[b[0], b[1]] += bytes_ / 2
    fig, ax = plt.subplots(figsize=(1.0 + topology.cols * 0.6,
                                    1.0 + topology.rows * 0.6))
    im = ax.imshow(grid / 1e9, cmap="viridis")
    ax.set_xlabel("die column")
    ax.set_ylabel("die row")
    ax.set_title("per-die routed traffic (GB)")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_schedule(stream_degree: int, out_dir: str | Path,
                   basename: str = "schedule") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{basename}.txt"
    path.write_text(dump_schedule(generate_stream_schedule(stream_degree)))
    return path


def write_series_csv(rows: Sequence[tuple], header: str, path: Path) -> Path:
    lines = [header]
    for row in rows:
        lines.append(",".join(f"{v:.6g}" if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def line_figure(rows: Sequence[tuple], xlabel: str, ylabel: str, title: str,
                path: Path, logx: bool = False) -> Path:
    xs = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, ys, marker="o")
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def breakdown_figure(report: CostReport, path: Path) -> Path:
    labels = ["compute", "p2p", "collective", "reshard"]
    values = [report.comp_seconds, report.p2p_seconds,
              report.collective_seconds, report.reshard_seconds]
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    ax.bar(labels, [v * 1e3 for v in values], color="#4878a8")
    ax.set_ylabel("seconds per step (ms)")
    ax.set_title(f"cost breakdown  {report.strategy}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_sweep(rows: Sequence[tuple[int, float]], out_dir: str | Path,
                axis: str, basename: str = "sweep") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv = write_series_csv(rows, f"{axis},tokens_per_s", out / f"{basename}.csv")
    fig = line_figure(rows, f"{axis} degree", "tokens/s",
                      f"throughput vs {axis} degree", out / f"{basename}.png",
                      logx=True)
    return [csv, fig]


def write_convergence(trace: Sequence[tuple[int, float]], out_dir: str | Path,
                      basename: str = "convergence") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv = write_series_csv(trace, "generation,best_cost_s", out / f"{basename}.csv")
    fig = line_figure(trace, "generation", "best step time (s)",
                      "search convergence", out / f"{basename}.png")
    return [csv, fig]


def write_fault_series(series: Sequence[tuple[float, float]], out_dir: str | Path,
                       kind: str, basename: Optional[str] = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    basename = basename or f"faults_{kind}"
    csv = write_series_csv(series, f"{kind}_fault_rate,normalized_throughput",
                           out / f"{basename}.csv")
    fig = line_figure(series, f"{kind} fault rate", "normalized throughput",
                      f"throughput vs {kind} fault rate", out / f"{basename}.png")
    return [csv, fig]
