"""Reading and writing allocation, assignment and CSV result files.

Profile files live in :mod:`hplb.profiler`. All loaders here are strict:
unknown or missing fields are rejected with the offending field path.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

from .allocator import ALLOCATION_FORMAT_VERSION, BudgetAllocation
from .errors import ProfileFormatError
from .partitioner import Assignment, LoadReport, imbalance, imbalance_of_loads

ASSIGNMENT_FORMAT_VERSION = 1


def _expect_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ProfileFormatError("expected an object", field=where or "<root>")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ProfileFormatError(f"unknown field(s) {', '.join(extra)}", field=where or "<root>")
    missing = sorted(set(allowed) - set(obj))
    if missing:
        raise ProfileFormatError(f"missing field(s) {', '.join(missing)}", field=where or "<root>")


def _int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ProfileFormatError(f"expected an integer, got {value!r}", field=where)
    return value


def _read_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileFormatError(exc.msg, line=exc.lineno) from None


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# -- allocations --------------------------------------------------------------

def parse_allocation(doc) -> BudgetAllocation:
    _expect_keys(doc, ("version", "total", "floor", "budgets"), "")
    if doc["version"] != ALLOCATION_FORMAT_VERSION:
        raise ProfileFormatError(f"unsupported version {doc['version']!r}", field="version")
    total = _int(doc["total"], "total")
    floor = _int(doc["floor"], "floor")
    if not isinstance(doc["budgets"], list) or not doc["budgets"]:
        raise ProfileFormatError("expected a nonempty list", field="budgets")
    heads, budgets = [], []
    for i, entry in enumerate(doc["budgets"]):
        where = f"budgets[{i}]"
        _expect_keys(entry, ("layer", "head", "budget"), where)
        heads.append((_int(entry["layer"], f"{where}.layer"), _int(entry["head"], f"{where}.head")))
        budgets.append(_int(entry["budget"], f"{where}.budget"))
    if len(set(heads)) != len(heads):
        raise ProfileFormatError("duplicate head entries", field="budgets")
    if sum(budgets) != total:
        raise ProfileFormatError(f"budgets sum to {sum(budgets)}, not total {total}", field="total")
    low = [i for i, b in enumerate(budgets) if b < floor]
    if low:
        raise ProfileFormatError(f"budget below floor {floor}", field=f"budgets[{low[0]}].budget")
    return BudgetAllocation(tuple(budgets), total, floor, tuple(heads), method="file")


def save_allocation(path, allocation: BudgetAllocation) -> Path:
    return _write_json(path, allocation.to_dict())


def load_allocation(path) -> BudgetAllocation:
    return parse_allocation(_read_json(path))


# -- assignments ----------------------------------------------------------------

def assignment_to_dict(assignment: Assignment, budgets: Sequence[int],
                       heads: Sequence[tuple[int, int]] | None = None) -> dict:
    if heads is None:
        heads = [(0, h) for h in range(assignment.n_heads)]
    report = imbalance(budgets, assignment)
    return {
        "version": ASSIGNMENT_FORMAT_VERSION,
        "devices": assignment.n_devices,
        "assignment": [
            {"layer": layer, "head": head, "device": d}
            for (layer, head), d in zip(heads, assignment.device_of)
        ],
        "loads": list(report.loads),
        "imbalance": report.imbalance,
    }


def parse_assignment(doc) -> tuple[Assignment, list[tuple[int, int]], LoadReport]:
    """Returns the assignment, the head labels, and the stored load report."""
    _expect_keys(doc, ("version", "devices", "assignment", "loads", "imbalance"), "")
    if doc["version"] != ASSIGNMENT_FORMAT_VERSION:
        raise ProfileFormatError(f"unsupported version {doc['version']!r}", field="version")
    k = _int(doc["devices"], "devices")
    if k < 1:
        raise ProfileFormatError("need at least one device", field="devices")
    if not isinstance(doc["assignment"], list) or not doc["assignment"]:
        raise ProfileFormatError("expected a nonempty list", field="assignment")
    heads, device_of = [], []
    for i, entry in enumerate(doc["assignment"]):
        where = f"assignment[{i}]"
        _expect_keys(entry, ("layer", "head", "device"), where)
        heads.append((_int(entry["layer"], f"{where}.layer"), _int(entry["head"], f"{where}.head")))
        d = _int(entry["device"], f"{where}.device")
        if not 0 <= d < k:
            raise ProfileFormatError(f"device {d} outside [0, {k})", field=f"{where}.device")
        device_of.append(d)
    if len(set(heads)) != len(heads):
        raise ProfileFormatError("head assigned more than once", field="assignment")
    loads = doc["loads"]
    if not isinstance(loads, list) or len(loads) != k:
        raise ProfileFormatError(f"expected {k} loads", field="loads")
    for i, x in enumerate(loads):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or x < 0:
            raise ProfileFormatError(f"bad load {x!r}", field=f"loads[{i}]")
    ratio = doc["imbalance"]
    if isinstance(ratio, bool) or not isinstance(ratio, (int, float)) or not math.isfinite(ratio) or ratio < 1.0:
        raise ProfileFormatError(f"imbalance must be a finite number >= 1, got {ratio!r}", field="imbalance")
    report = imbalance_of_loads(loads)
    if abs(report.imbalance - ratio) > 1e-9 * max(1.0, ratio):
        raise ProfileFormatError(f"stored imbalance {ratio} disagrees with loads ({report.imbalance})",
                                 field="imbalance")
    return Assignment(k, tuple(device_of)), heads, report


def save_assignment(path, assignment: Assignment, budgets, heads=None) -> Path:
    return _write_json(path, assignment_to_dict(assignment, budgets, heads))


def load_assignment(path):
    return parse_assignment(_read_json(path))


# -- CSV ----------------------------------------------------------------------

def format_value(value) -> str:
    # repr keeps full float precision and is stable across runs
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.write_text(rows_to_csv(columns, rows))
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
