"""Report schema, validation, and deterministic serialization.

Reports are schema-versioned JSON with sorted keys and no timestamps, so
re-running a command with identical inputs and seed is byte-identical.
CSV sidecars carry plot-ready curves.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .errors import InvariantError

SCHEMA_VERSION = 1

REQUIRED_FIELDS = {
    "analyze": ("inputs", "kl_curve", "watershed", "criterion", "corpus_size"),
    "memory": ("params", "reference_rows"),
    "run": ("config", "turns", "ledger", "totals"),
    "compare": ("config", "policies", "table"),
}


def make_report(kind: str, seed: int, payload: dict) -> dict:
    report = {"kind": kind, "schema_version": SCHEMA_VERSION, "seed": seed}
    report.update(payload)
    validate_report(report)
    return report


def _walk_finite(node, path: str) -> None:
    if isinstance(node, float):
        if not math.isfinite(node):
            raise InvariantError(f"non-finite value at {path}: {node}")
    elif isinstance(node, dict):
        for key, value in node.items():
            _walk_finite(value, f"{path}.{key}")
    elif isinstance(node, (list, tuple)):
        for i, value in enumerate(node):
            _walk_finite(value, f"{path}[{i}]")


def validate_report(report: dict) -> None:
    kind = report.get("kind")
    if kind not in REQUIRED_FIELDS:
        raise InvariantError(f"unknown report kind {kind!r}")
    if report.get("schema_version") != SCHEMA_VERSION:
        raise InvariantError("report schema_version mismatch")
    if "seed" not in report:
        raise InvariantError("report is missing its seed")
    for field in REQUIRED_FIELDS[kind]:
        if field not in report:
            raise InvariantError(f"{kind} report is missing field {field!r}")
    _walk_finite(report, kind)


def dumps_report(report: dict) -> str:
    validate_report(report)
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(path: Path, report: dict) -> None:
    Path(path).write_text(dumps_report(report), encoding="utf-8")


def write_cost_curves_csv(path: Path, per_turn_curves) -> None:
    """Rows (turn, layer, step, phase, cost_us) for every turn's curves."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["turn", "layer", "step", "phase", "cost_us"])
        for turn, curves in per_turn_curves:
            for row in curves.rows():
                writer.writerow(
                    [turn, row["layer"], row["step"], row["phase"],
                     repr(row["cost_us"])]
                )


def write_ledger_csv(path: Path, ledger_rows: list[dict]) -> None:
    fields = ["turn", "h2d_events", "h2d_bytes", "d2h_events", "d2h_bytes",
              "device_used_bytes"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in ledger_rows:
            writer.writerow(row)
