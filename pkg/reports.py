#!/usr/bin/env python3

"""JSON and CSV emission of run reports with mean/std overhead aggregates."""

from typing import Dict, List, Optional, Sequence
import io
import json
import logging

import pandas as pd

import parameters
from solver import RunReport

RUN_COLUMNS: List[str] = [
    "label", "status", "converged", "iterations", "node_count", "redundancy", "failures",
    "location", "progress", "trigger_iteration", "residual_norm", "true_residual_norm",
    "residual_difference", "reference_residual_difference", "reference_iterations",
    "max_deviation", "restarts", "messages", "elements_sent", "extra_elements", "extra_edges",
    "allreduce_count", "model_time", "extra_model_time", "recovery_messages",
    "recovery_elements", "recovery_model_time", "overhead_elements", "overhead_undisturbed",
    "reconstruction_time", "overhead_with_failures", "diagnostic",
]
"""CSV column order, one row per run."""

AGGREGATE_KEYS = ["redundancy", "failures", "location"]
AGGREGATE_METRICS = ["overhead_undisturbed", "reconstruction_time", "overhead_with_failures",
                     "overhead_elements"]


def run_row(report: RunReport, include_wall_clock: bool = False) -> Dict:
    """Flatten a report into the CSV columns."""
    data = report.to_dict()
    row = {key: data.get(key) for key in RUN_COLUMNS if key in data}
    row.update(data["stats"])
    row["restarts"] = sum(r.restarted_count for r in report.recoveries)
    row = {key: row.get(key) for key in RUN_COLUMNS}
    if include_wall_clock:
        row["wall_clock"] = report.wall_clock
    return row


def aggregate_reports(reports: Sequence[RunReport]) -> List[Dict]:
    """
    Mean and standard deviation of the overhead ratios per (ρ, nf, location).

    The reference run carries no ratios and is left out; a single-run group has
    a standard deviation of 0.
    """
    rows = [run_row(r) for r in reports if r.overhead_undisturbed is not None]
    if not rows:
        return []
    frame = pd.DataFrame(rows, columns=RUN_COLUMNS)
    grouped = frame.groupby(AGGREGATE_KEYS, sort=True)[AGGREGATE_METRICS]
    means = grouped.mean()
    stds = grouped.std(ddof=1).fillna(0.0)
    counts = grouped.size()

    aggregates = []
    for key in means.index:
        entry = dict(zip(AGGREGATE_KEYS, key))
        entry["redundancy"] = int(entry["redundancy"])
        entry["failures"] = int(entry["failures"])
        entry["runs"] = int(counts.loc[key])
        for metric in AGGREGATE_METRICS:
            entry[f"{metric}_mean"] = float(means.loc[key, metric])
            entry[f"{metric}_std"] = float(stds.loc[key, metric])
        aggregates.append(entry)
    return aggregates


def emit_report(reports: Sequence[RunReport], fmt: str = "json", path: Optional[str] = None,
                include_wall_clock: bool = False) -> str:
    """
    Serialize reports; write them to path when given.

    JSON carries a schema version, the runs in order and the aggregate block.
    CSV has one row per run with a fixed column order.

    Raises:
        ValueError: Unknown format.
        OSError: The file cannot be written.
    """
    if fmt == "json":
        document = {
            "schema_version": parameters.REPORT_SCHEMA_VERSION,
            "runs": [r.to_dict(include_wall_clock) for r in reports],
            "aggregates": aggregate_reports(reports),
        }
        text = json.dumps(document, indent=2) + "\n"
    elif fmt == "csv":
        columns = RUN_COLUMNS + (["wall_clock"] if include_wall_clock else [])
        frame = pd.DataFrame([run_row(r, include_wall_clock) for r in reports], columns=columns)
        buffer = io.StringIO()
        frame.to_csv(buffer, index=False)
        text = buffer.getvalue()
    else:
        raise ValueError(f"Unknown report format {fmt!r}; expected one of {parameters.REPORT_FORMATS}")

    if path:
        with open(path, "w") as f:
            f.write(text)
        logging.info("Saved %d run reports to %s", len(reports), path)
    return text
