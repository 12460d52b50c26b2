"""Batch evaluation of prediction files against ground truth, written as ``results.csv``."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import NIFTI_SUFFIXES, discover_patients, load_description
from .errors import GeometryMismatch, NoPredictionsFound
from .metrics import (
    DEFAULT_METRICS,
    DEFAULT_SURFACE_TOLERANCE,
    METRICS,
    ClassSpec,
    class_specs,
    evaluate_pair,
    worst_case,
)
from .nifti import read_nifti, read_nifti_header
from .parallel import map_ordered
from .volume import LABELS, diagonal_mm

log = logging.getLogger(__name__)

SUMMARY_ROWS = ("mean", "std", "median", "p25", "p75")
CSV_DECIMALS = 4


@dataclass
class MetricsTable:
    columns: list
    rows: dict = field(default_factory=dict)
    flagged: set = field(default_factory=set)

    def __post_init__(self):
        self.columns = [tuple(c) for c in self.columns]
        for cls, metric in self.columns:
            if not cls:
                raise ValueError("class names must be nonempty")
            if metric not in METRICS:
                raise ValueError(f"unknown metric {metric!r}")
        for pid, values in self.rows.items():
            if len(values) != len(self.columns):
                raise ValueError(f"row {pid} has {len(values)} values for {len(self.columns)} columns")

    @property
    def ids(self) -> list[str]:
        return sorted(self.rows)

    def column_names(self) -> list[str]:
        return [f"{cls}_{metric}" for cls, metric in self.columns]

    def summary(self) -> dict:
        """Statistics over unflagged patient rows; std uses n-1 (0 for a single row)."""
        used = [self.rows[i] for i in self.ids if i not in self.flagged]
        if not used:
            return {name: [float("nan")] * len(self.columns) for name in SUMMARY_ROWS}
        arr = np.asarray(used, dtype=np.float64)
        std = arr.std(axis=0, ddof=1) if arr.shape[0] > 1 else np.zeros(arr.shape[1])
        return {
            "mean": arr.mean(axis=0).tolist(),
            "std": std.tolist(),
            "median": np.median(arr, axis=0).tolist(),
            "p25": np.percentile(arr, 25, axis=0).tolist(),
            "p75": np.percentile(arr, 75, axis=0).tolist(),
        }

    def means(self) -> dict:
        return dict(zip(self.columns, self.summary()["mean"]))


def _fmt(value: float) -> str:
    if value is None or not np.isfinite(value):
        return "nan"
    text = f"{value:.{CSV_DECIMALS}f}"
    return "0.0000" if text == "-0.0000" else text


def results_csv_text(table: MetricsTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", *table.column_names()])
    for pid in table.ids:
        writer.writerow([pid, *(_fmt(v) for v in table.rows[pid])])
    summary = table.summary()
    for name in SUMMARY_ROWS:
        writer.writerow([name, *(_fmt(v) for v in summary[name])])
    return buf.getvalue()


def write_results_csv(table: MetricsTable, path) -> None:
    Path(path).write_text(results_csv_text(table))


def _split_column(name: str) -> tuple[str, str]:
    for metric in sorted(METRICS, key=len, reverse=True):
        if name.endswith("_" + metric):
            return name[: -len(metric) - 1], metric
    raise ValueError(f"column {name!r} does not end with a known metric")


def read_results_csv(path) -> MetricsTable:
    """Patient rows of a results CSV (summary rows are recomputed, not read)."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "id":
            raise ValueError(f"{path}: first column must be 'id'")
        columns = [_split_column(h) for h in header[1:]]
        rows, flagged = {}, set()
        for row in reader:
            if not row or row[0] in SUMMARY_ROWS:
                continue
            values = [float(v) for v in row[1:]]
            rows[row[0]] = values
            if any(np.isnan(values)):
                flagged.add(row[0])
    return MetricsTable(columns, rows, flagged)


# pairing predictions with truth


def _strip(name: str) -> Optional[str]:
    for s in NIFTI_SUFFIXES:
        if name.endswith(s):
            return name[: -len(s)]
    return None


def truth_masks(truth_source) -> tuple[dict, Optional[list]]:
    """Map id -> truth mask path, plus the dataset's classes when given a dataset JSON."""
    src = Path(truth_source)
    if src.is_file():
        desc = load_description(src)
        records = discover_patients(desc, "train")
        return {r.id: r.mask_path for r in records}, class_specs(desc.final_classes)
    if src.is_dir():
        out = {}
        for f in sorted(src.iterdir()):
            pid = _strip(f.name)
            if pid is not None and f.is_file():
                out[pid] = f
        return out, None
    raise FileNotFoundError(f"truth source {src} does not exist")


def prediction_path(pred_dir, pid: str) -> Optional[Path]:
    for s in NIFTI_SUFFIXES:
        p = Path(pred_dir) / f"{pid}{s}"
        if p.exists():
            return p
    return None


class _PairJob:
    def __init__(self, specs, metrics, tolerance):
        self.specs = specs
        self.metrics = metrics
        self.tolerance = tolerance

    def __call__(self, item):
        pid, pred_path, truth_path = item
        columns = [(s.name, m) for s in self.specs for m in self.metrics]
        if pred_path is None:
            hdr = read_nifti_header(truth_path)
            diag = diagonal_mm(hdr.shape, hdr.spacing)
            return pid, [worst_case(m, diag) for _, m in columns], "missing"
        pred = read_nifti(pred_path, kind=LABELS)
        truth = read_nifti(truth_path, kind=LABELS)
        try:
            values = evaluate_pair(pred, truth, self.specs, self.metrics, tolerance=self.tolerance)
        except GeometryMismatch as exc:
            return pid, [float("nan")] * len(columns), f"geometry: {exc}"
        return pid, [values[c] for c in columns], ""


def evaluate_run(
    pred_dir,
    truth_source,
    specs: Optional[Sequence[ClassSpec]] = None,
    metrics: Sequence[str] = DEFAULT_METRICS,
    workers: int = 1,
    tolerance: float = DEFAULT_SURFACE_TOLERANCE,
    ids: Optional[Sequence[str]] = None,
) -> MetricsTable:
    """Score every truth patient (or ``ids``) against ``<pred_dir>/<id>.nii[.gz]``."""
    truths, dataset_specs = truth_masks(truth_source)
    specs = list(specs) if specs is not None else dataset_specs
    if not specs:
        raise ValueError("no evaluation classes given")
    metrics = list(metrics)
    if ids is not None:
        truths = {i: truths[i] for i in ids if i in truths}
    items = [(pid, prediction_path(pred_dir, pid), truths[pid]) for pid in sorted(truths)]
    if not any(p is not None for _, p, _ in items):
        raise NoPredictionsFound(f"no predictions in {pred_dir} match the truth cohort")

    table = MetricsTable([(s.name, m) for s in specs for m in metrics])
    for pid, values, status in map_ordered(_PairJob(specs, metrics, tolerance), items, workers):
        table.rows[pid] = values
        if status == "missing":
            log.warning("no prediction found, scoring worst case", extra={"patient": pid})
        elif status:
            log.warning("%s; excluded from summary", status, extra={"patient": pid})
            table.flagged.add(pid)
    return table
