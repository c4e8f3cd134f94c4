"""Learning-curve persistence and the step-count comparison table."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

METRICS_HEADER = ["method", "subtask", "env_steps", "success_rate", "wall_clock_seconds", "seed",
                  "sequence_accuracy"]

# method label -> (report row, stage columns it fills)
REPORT_ROWS = {
    "DDPG+HER end-to-end": {"e2e": "Total"},
    "BC LSE": {"bc": None, "hlc_bc": "HLC"},
    "DDPG+HER LSE": {"ddpg_her": None, "hlc": "HLC"},
}
STAGE_COLUMNS = {"approach": "LSE1", "manipulate": "LSE2", "retract": "LSE3"}
FETCH_REFERENCE = {
    "DDPG+HER end-to-end": ("-", "-", "-", "-", "1.4M", "~1h"),
    "BC LSE": ("152k", "52k", "168k", "98k", "470k", "~25 min"),
    "DDPG+HER LSE": ("150k", "30k", "38k", "98k", "316k", "~18 min"),
}


@dataclass
class MetricsRow:
    method: str
    subtask: str
    env_steps: int
    success_rate: float
    wall_clock_seconds: float | None
    seed: int
    sequence_accuracy: float | None = None

    def as_csv(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [self.method, self.subtask, str(int(self.env_steps)), repr(float(self.success_rate)),
                fmt(self.wall_clock_seconds), str(int(self.seed)), fmt(self.sequence_accuracy)]


def append_metrics(path: str | Path, rows: Iterable[MetricsRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(row.as_csv())
    return path


def read_metrics(path: str | Path) -> list[MetricsRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            def opt(key):
                v = rec.get(key, "")
                return float(v) if v not in ("", None) else None
            out.append(MetricsRow(rec["method"], rec["subtask"], int(rec["env_steps"]),
                                  float(rec["success_rate"]), opt("wall_clock_seconds"),
                                  int(rec["seed"]), opt("sequence_accuracy")))
    return out


def first_crossing(rows: Sequence[MetricsRow], threshold: float) -> MetricsRow | None:
    """First row (in env-step order) whose success rate reaches ``threshold``."""
    for row in sorted(rows, key=lambda r: r.env_steps):
        if row.success_rate >= threshold:
            return row
    return None


def stage_crossings(rows: Iterable[MetricsRow], threshold: float) -> dict[tuple[str, str, int], MetricsRow | None]:
    groups: dict[tuple[str, str, int], list[MetricsRow]] = defaultdict(list)
    for r in rows:
        groups[(r.method, r.subtask, r.seed)].append(r)
    return {key: first_crossing(g, threshold) for key, g in groups.items()}


def _fmt_steps(v: float | None) -> str:
    return "not reached" if v is None else f"{int(round(v)):d}"


def _fmt_time(v: float | None) -> str:
    if v is None:
        return "n/a"
    return f"{v:.1f}s" if v < 120 else f"{v / 60:.1f} min"


def compare_table(rows: Iterable[MetricsRow], threshold: float = 0.9) -> dict[str, dict[str, str]]:
    """Per report row: step counts per stage, total steps and total time, averaged over seeds.

    A stage where any seed never crosses ``threshold`` is "not reached", and so
    is the total. Rows for methods absent from the metrics are omitted.
    """
    crossings = stage_crossings(rows, threshold)
    table: dict[str, dict[str, str]] = {}
    for label, methods in REPORT_ROWS.items():
        stages: dict[str, list[MetricsRow | None]] = defaultdict(list)
        for (method, subtask, _seed), hit in crossings.items():
            if method not in methods:
                continue
            column = methods[method] or STAGE_COLUMNS.get(subtask)
            if column is not None:
                stages[column].append(hit)
        if not stages:
            continue
        cells: dict[str, str] = {}
        total_steps, total_time, reached = 0.0, 0.0, True
        timed = True
        for column in ("LSE1", "LSE2", "LSE3", "HLC", "Total"):
            hits = stages.get(column)
            if hits is None:
                cells[column] = "-"
                continue
            if any(h is None for h in hits):
                cells[column] = "not reached"
                reached = False
                continue
            mean_steps = sum(h.env_steps for h in hits) / len(hits)
            cells[column] = _fmt_steps(mean_steps)
            total_steps += mean_steps
            if any(h.wall_clock_seconds is None for h in hits):
                timed = False
            else:
                total_time += sum(h.wall_clock_seconds for h in hits) / len(hits)
        if "Total" not in stages:
            cells["Total"] = _fmt_steps(total_steps) if reached else "not reached"
        cells["Time"] = _fmt_time(total_time) if (reached and timed) else "n/a"
        table[label] = cells
    return table


def compare_report(paths: Sequence[str | Path], threshold: float = 0.9) -> str:
    """Plain-text comparison table, with the Fetch reference step counts printed below it."""
    rows: list[MetricsRow] = []
    for p in paths:
        rows.extend(read_metrics(p))
    table = compare_table(rows, threshold)
    columns = ["LSE1", "LSE2", "LSE3", "HLC", "Total", "Time"]
    width = max(len(k) for k in REPORT_ROWS) + 2
    lines = [f"Env steps to reach success >= {threshold:g} (mean over seeds)",
             "".ljust(width) + "".join(c.rjust(13) for c in columns)]
    for label, cells in table.items():
        lines.append(label.ljust(width) + "".join(cells[c].rjust(13) for c in columns))
    lines.append("")
    lines.append("Reference: Fetch simulator step counts at the 100% success level (not directly comparable)")
    for label, cells in FETCH_REFERENCE.items():
        lines.append(label.ljust(width) + "".join(c.rjust(13) for c in cells))
    return "\n".join(lines)
