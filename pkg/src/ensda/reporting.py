"""Offline aggregation of study metrics into tables.

Each report kind is a pure function of the metrics file. Tables are lists
of rows (dicts); the CLI renders them as CSV.
"""

import csv
import io

import numpy as np

from .errors import ReportError
from .metrics import read_events

REPORT_KINDS = ("prop-hist", "update-scaling", "efficiency", "trace")


def propagation_walltimes(events, cycles=None) -> list[float]:
    return [
        e["wall_ms"]
        for e in events
        if e.get("event") == "member_done" and (cycles is None or e["cycle"] in cycles)
    ]


def report_prop_hist(events, bins: int = 20) -> list[dict]:
    """Histogram of member propagation walltimes (bin_lo_ms, bin_hi_ms, count)."""
    walls = propagation_walltimes(events)
    if not walls:
        raise ReportError("no member_done events in metrics")
    counts, edges = np.histogram(walls, bins=bins)
    return [
        {"bin_lo_ms": round(float(edges[i]), 3), "bin_hi_ms": round(float(edges[i + 1]), 3), "count": int(c)}
        for i, c in enumerate(counts)
    ]


def report_update_scaling(events) -> list[dict]:
    """Update-phase walltime per cycle (cycle, members, observations, wall_ms)."""
    rows = [
        {
            "cycle": e["cycle"],
            "members": e["members"],
            "observations": e.get("observations", 0),
            "wall_ms": e["wall_ms"],
        }
        for e in events
        if e.get("event") == "phase" and e.get("phase") == "update"
    ]
    if not rows:
        raise ReportError("no update phase events in metrics")
    return rows


def report_efficiency(events) -> list[dict]:
    """Propagation efficiency per cycle against an ideal zero-idle schedule.

    efficiency = sum(member walltimes) / (runners * phase walltime); with a
    single runner this is 1 by construction, so the column doubles as the
    parallel efficiency against the single-runner baseline when member
    costs are deterministic.
    """
    rows = []
    for e in events:
        if e.get("event") != "phase" or e.get("phase") != "propagate":
            continue
        busy = e.get("busy_ms", {})
        runners = len(busy)
        total_busy = sum(busy.values())
        wall = e["wall_ms"]
        eff = total_busy / (runners * wall) if runners and wall > 0 else 0.0
        rows.append(
            {
                "cycle": e["cycle"],
                "runners": runners,
                "busy_ms": round(total_busy, 3),
                "wall_ms": e["wall_ms"],
                "efficiency": round(eff, 4),
            }
        )
    if not rows:
        raise ReportError("no propagation phase events in metrics")
    return rows


def report_trace(events) -> list[dict]:
    """Per-member execution trace (cycle, member, runner, start_ms, end_ms)."""
    starts = {}
    rows = []
    for e in events:
        if e.get("event") == "assign":
            starts[(e["cycle"], e["member"])] = e["t_ms"]
        elif e.get("event") == "member_done":
            key = (e["cycle"], e["member"])
            start = starts.get(key)
            rows.append(
                {
                    "cycle": e["cycle"],
                    "member": e["member"],
                    "runner": e["runner"],
                    "start_ms": start,
                    "end_ms": e["t_ms"],
                    "wall_ms": e["wall_ms"],
                }
            )
    if not rows:
        raise ReportError("no assignment events in metrics")
    return rows


def run_report(metrics_path, kind: str) -> list[dict]:
    events = read_events(metrics_path)
    if kind == "prop-hist":
        return report_prop_hist(events)
    if kind == "update-scaling":
        return report_update_scaling(events)
    if kind == "efficiency":
        return report_efficiency(events)
    if kind == "trace":
        return report_trace(events)
    raise ReportError(f"unknown report kind {kind!r}; choose from {', '.join(REPORT_KINDS)}")


def rows_to_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    return out.getvalue()
