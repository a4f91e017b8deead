"""Reading metrics CSVs and summarising them per algorithm."""

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fltrain import METRIC_COLUMNS

_NAME = re.compile(r"^(?P<algorithm>.+?)_seed(?P<seed>-?\d+)$")


class SchemaError(ValueError):
    pass


@dataclass
class Run:
    """One metrics CSV: its algorithm label and the columns as arrays."""

    algorithm: str
    path: Path
    columns: dict

    @property
    def final_accuracy(self):
        return float(self.columns["test_accuracy"][-1])

    @property
    def traffic(self):
        return self.columns["upload_bytes"] + self.columns["download_bytes"]

    def traffic_to(self, target=None):
        """Cumulative up+down bytes when ``target`` accuracy is first reached.

        Without a target this is the final total; None if never reached.
        """
        traffic = self.traffic
        if target is None:
            return float(traffic[-1])
        hit = np.flatnonzero(self.columns["test_accuracy"] >= target)
        return float(traffic[hit[0]]) if hit.size else None


def algorithm_label(path):
    stem = Path(path).stem
    match = _NAME.match(stem)
    return match.group("algorithm") if match else stem


def read_metrics(path):
    """Load a metrics CSV, checking the header against the fixed schema."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        missing = [c for c in METRIC_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns: {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    index = [header.index(c) for c in METRIC_COLUMNS]
    data = np.array([[float(r[i]) for i in index] for r in rows])
    return Run(algorithm_label(path), path, dict(zip(METRIC_COLUMNS, data.T)))


def reduction_pct(reference, baseline):
    """Percent traffic saved by ``reference`` relative to ``baseline``."""
    return (1.0 - reference / baseline) * 100.0


@dataclass
class AlgorithmSummary:
    algorithm: str
    n_runs: int
    final_accuracy: float
    traffic: float | None
    reduction: float | None = None


def summarize(runs, target=None, reference=None):
    """Average final accuracy and traffic per algorithm, in first-seen order.

    Traffic is None when any run misses the target. Reductions are taken
    against ``reference`` (default: ``fediac`` when present, else the first
    algorithm) and left None for the reference row itself.
    """
    groups = {}
    for run in runs:
        groups.setdefault(run.algorithm, []).append(run)
    rows = []
    for algorithm, group in groups.items():
        traffic = [r.traffic_to(target) for r in group]
        mean_traffic = None if any(t is None for t in traffic) else float(np.mean(traffic))
        rows.append(AlgorithmSummary(algorithm, len(group),
                                     float(np.mean([r.final_accuracy for r in group])),
                                     mean_traffic))
    if reference is None:
        reference = "fediac" if "fediac" in groups else rows[0].algorithm
    ref = next((r for r in rows if r.algorithm == reference), None)
    if ref is None:
        raise ValueError(f"reference algorithm {reference!r} not among the inputs")
    if len(rows) > 1 and ref.traffic is not None:
        for row in rows:
            if row is not ref and row.traffic:
                row.reduction = reduction_pct(ref.traffic, row.traffic)
    return rows


def format_table(rows, target=None):
    show_reduction = len(rows) > 1
    traffic_head = "traffic_to_target_MB" if target is not None else "total_traffic_MB"
    head = ["algorithm", "runs", "final_accuracy", traffic_head]
    if show_reduction:
        head.append("reduced_%")
    lines = [head]
    for r in rows:
        line = [r.algorithm, str(r.n_runs), f"{r.final_accuracy:.4f}",
                "n/a" if r.traffic is None else f"{r.traffic / 1e6:.3f}"]
        if show_reduction:
            line.append("-" if r.reduction is None else f"{r.reduction:.2f}")
        lines.append(line)
    widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip()
                     for line in lines)


def write_summary(path, runs, target=None):
    """Per-run summary CSV: final accuracy at the budget and traffic to target."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["algorithm", "seed", "iterations", "wall_clock_s", "final_accuracy",
                         "total_traffic_bytes", "target_accuracy", "traffic_to_target_bytes"])
        for run in runs:
            c = run.columns
            to_target = run.traffic_to(target) if target is not None else None
            writer.writerow([
                run.algorithm, int(c["seed"][-1]), int(c["iteration"][-1]),
                repr(float(c["wall_clock_s"][-1])), repr(run.final_accuracy),
                int(run.traffic[-1]), "" if target is None else repr(float(target)),
                "" if to_target is None else int(to_target),
            ])
