"""Report emission: JSON documents, aligned text tables, CSV exports.

Writes are atomic (temp file in the target directory, then rename) so a
crashed run never leaves a half-written report behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
from typing import Sequence

from .metrics import AccuracyMatrix, ExperimentReport


def atomic_write_text(path: str, content: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(content)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(cell)) for cell in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_report_table(report: ExperimentReport) -> str:
    """One row per regime: per-dataset accuracies plus the average."""
    header = [""] + report.dataset_ids + ["Average"]
    row = [report.regime]
    row += [f"{report.per_dataset_accuracy[d]:.2f}" for d in report.dataset_ids]
    row += [f"{report.average_accuracy:.2f}"]
    rows = [row]
    out = _table(header, rows)
    if report.forgetting is not None:
        out += f"\nFgt: {report.forgetting:.2f}\n"
    return out


def render_matrix_table(matrix: AccuracyMatrix) -> str:
    """The full a[i, k] wedge, stages as columns."""
    header = ["dataset \\ stage"] + [f"k={k + 1}" for k in range(matrix.size)]
    rows = []
    for i in range(matrix.size):
        row = [matrix.dataset_ids[i]]
        for k in range(matrix.size):
            row.append(f"{matrix.get(i, k):.2f}" if k >= i else "")
        rows.append(row)
    return _table(header, rows)


def render_grid_table(lengths: Sequence[int], positions: Sequence[str],
                      grid: dict[tuple[int, str], float]) -> str:
    """Prompt-length x position grid of average accuracies."""
    header = ["Prompt Length"] + [p.capitalize() for p in positions]
    rows = []
    for length in lengths:
        rows.append([str(length)] + [f"{grid[(length, p)]:.2f}" for p in positions])
    return _table(header, rows)


def render_orders_table(robustness: dict) -> str:
    header = [""] + list(robustness["orders"])
    rows = [["average"] + [f"{a:.2f}" for a in robustness["averages"]]]
    out = _table(header, rows)
    out += f"\nspread (max-min): {robustness['spread']:.2f}\n"
    return out


def forgetting_csv(matrix: AccuracyMatrix, per_dataset: Sequence[float]) -> str:
    """Per-dataset forgetting values, one row each (bar-chart friendly)."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["dataset", "forgetting"])
    for name, value in zip(matrix.dataset_ids[:-1], per_dataset):
        writer.writerow([name, f"{value:.6f}"])
    return buf.getvalue()


def timings_csv(rows: Sequence[tuple[int, int, float]]) -> str:
    """(sequence_rows, layer_count, median_seconds) triples."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["n", "layers", "median_seconds"])
    for n, layers, seconds in rows:
        writer.writerow([n, layers, f"{seconds:.6f}"])
    return buf.getvalue()
