"""Label-targeted postprocessing of discrete predictions.

A strategy file is an ordered JSON list; each entry targets a set of labels::

    [
      {"labels": [3], "connectivity": 26,
       "ops": [{"op": "remove_small", "min_voxels": 50, "replace_label": 2}]},
      {"labels": [1, 2, 3],
       "ops": [{"op": "top_k", "k": 1},
               {"op": "morph_clean", "radius": 1},
               {"op": "fill_holes", "fill_label": 1}]}
    ]

Voxels removed by an op become background unless the op names a
``replace_label``. ``fill_holes`` only relabels background (label 0) voxels
enclosed by the target region.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import CohortMismatch
from .evaluate import MetricsTable, evaluate_run, prediction_path, read_results_csv, write_results_csv
from .metrics import DEFAULT_METRICS, DEFAULT_SURFACE_TOLERANCE, HIGHER_IS_BETTER, ClassSpec
from .nifti import read_nifti, write_nifti
from .parallel import map_ordered
from .volume import LABELS, Volume

log = logging.getLogger(__name__)

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}
# background connectivity dual to the foreground one
_DUAL = {6: 26, 18: 6, 26: 6}


@dataclass(frozen=True)
class RemoveSmall:
    min_voxels: int
    replace_label: Optional[int] = None

    def __post_init__(self):
        if self.min_voxels < 1:
            raise ValueError("min_voxels must be >= 1")


@dataclass(frozen=True)
class TopK:
    k: int
    replace_label: Optional[int] = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class MorphClean:
    radius: int
    replace_label: Optional[int] = None

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")


@dataclass(frozen=True)
class FillHoles:
    fill_label: int


Op = Union[RemoveSmall, TopK, MorphClean, FillHoles]
_OP_TYPES = {
    "remove_small": RemoveSmall,
    "top_k": TopK,
    "morph_clean": MorphClean,
    "fill_holes": FillHoles,
}


@dataclass(frozen=True)
class PostprocessStrategy:
    target_labels: frozenset
    ops: tuple
    connectivity: int = 26

    def __post_init__(self):
        if self.connectivity not in CONNECTIVITY_RANK:
            raise ValueError("connectivity must be 6, 18 or 26")
        if not self.target_labels:
            raise ValueError("strategy needs at least one target label")
        object.__setattr__(self, "target_labels", frozenset(int(l) for l in self.target_labels))
        object.__setattr__(self, "ops", tuple(self.ops))

    def validate(self, labels: Sequence[int]) -> None:
        allowed = set(labels)
        for op in self.ops:
            for attr in ("replace_label", "fill_label"):
                value = getattr(op, attr, None)
                if value is not None and value not in allowed:
                    raise ValueError(f"{type(op).__name__}.{attr}={value} is not a dataset label")


def parse_strategies(obj) -> list[PostprocessStrategy]:
    if isinstance(obj, dict):
        obj = [obj]
    out = []
    for entry in obj:
        ops = []
        for spec in entry["ops"]:
            spec = dict(spec)
            name = spec.pop("op")
            if name not in _OP_TYPES:
                raise ValueError(f"unknown postprocessing op {name!r}")
            ops.append(_OP_TYPES[name](**spec))
        out.append(
            PostprocessStrategy(
                frozenset(entry["labels"]), tuple(ops), int(entry.get("connectivity", 26))
            )
        )
    return out


def load_strategies(path) -> list[PostprocessStrategy]:
    return parse_strategies(json.loads(Path(path).read_text()))


# primitives


def connected_components(binary, connectivity: int = 26) -> tuple[np.ndarray, list[int]]:
    """Component labels (1..n, numbered in scan order of each component's first voxel)
    and component sizes sorted in decreasing order."""
    arr = binary.array if isinstance(binary, Volume) else np.asarray(binary)
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    labels, n = ndimage.label(arr.astype(bool), structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sorted((int(s) for s in sizes), reverse=True)


def _ball(radius: int) -> np.ndarray:
    r = int(radius)
    grid = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (grid**2).sum(axis=0) <= r * r


def binary_opening(region: np.ndarray, radius: int) -> np.ndarray:
    """Opening with a ball, computed on a zero-padded grid so it stays idempotent."""
    r = int(radius)
    padded = np.pad(region, r, mode="constant", constant_values=False)
    opened = ndimage.binary_opening(padded, structure=_ball(r))
    return opened[r:-r, r:-r, r:-r]


def enclosed_background(region: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Voxels outside ``region`` that cannot reach the grid border through the complement."""
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[_DUAL[connectivity]])
    return ndimage.binary_fill_holes(region, structure=structure) & ~region


def apply_op(mask, target_labels, op: Op, connectivity: int = 26):
    """Apply one op to the union of ``target_labels``; returns the same type it was given."""
    arr = mask.array if isinstance(mask, Volume) else np.asarray(mask)
    out = arr.astype(_widen(arr.dtype, op))
    region = np.isin(arr, sorted(target_labels))

    if isinstance(op, FillHoles):
        holes = enclosed_background(region, connectivity) & (arr == 0)
        out[holes] = op.fill_label
    else:
        if isinstance(op, MorphClean):
            removed = region & ~binary_opening(region, op.radius)
        else:
            comps, _ = connected_components(region, connectivity)
            sizes = np.bincount(comps.ravel())
            sizes[0] = 0
            if isinstance(op, RemoveSmall):
                drop = np.flatnonzero((sizes < op.min_voxels) & (sizes > 0))
            else:
                ids = np.flatnonzero(sizes)
                # sort by size desc, then by scan-order id
                order = ids[np.lexsort((ids, -sizes[ids]))]
                drop = order[op.k :]
            removed = np.isin(comps, drop) & region
        out[removed] = 0 if op.replace_label is None else op.replace_label

    if isinstance(mask, Volume):
        return mask.replace(data=out[np.newaxis])
    return out


def _widen(dtype, op) -> np.dtype:
    value = getattr(op, "fill_label", None) or getattr(op, "replace_label", None) or 0
    if np.can_cast(np.min_scalar_type(value), dtype):
        return dtype
    return np.result_type(dtype, np.min_scalar_type(value))


def apply_strategies(mask, strategies: Sequence[PostprocessStrategy]):
    for strategy in strategies:
        for op in strategy.ops:
            mask = apply_op(mask, strategy.target_labels, op, strategy.connectivity)
    return mask


# pipeline


def improvement_score(
    baseline: MetricsTable, new: MetricsTable, weights: Optional[Mapping] = None
) -> float:
    """Weighted sum of mean changes, signed so that improvements are positive."""
    if baseline.ids != new.ids:
        raise CohortMismatch("baseline and new results cover different patients")
    if set(baseline.columns) != set(new.columns):
        raise CohortMismatch("baseline and new results have different columns")
    base_means, new_means = baseline.means(), new.means()
    columns = new.columns
    if weights is None:
        weights = {c: 1.0 / len(columns) for c in columns}
    score = 0.0
    for col in columns:
        sign = 1.0 if HIGHER_IS_BETTER[col[1]] else -1.0
        score += weights.get(col, 0.0) * sign * (new_means[col] - base_means[col])
    return float(score)


class _PostprocessJob:
    def __init__(self, pred_dir, out_dir, strategies):
        self.pred_dir = pred_dir
        self.out_dir = out_dir
        self.strategies = strategies

    def __call__(self, pid):
        src = prediction_path(self.pred_dir, pid)
        vol = read_nifti(src, kind=LABELS)
        if vol.data.dtype.kind == "f":
            vol = vol.replace(data=vol.data.astype(np.int32))
        out = apply_strategies(vol, self.strategies)
        write_nifti(out, Path(self.out_dir) / f"{pid}.nii.gz")
        return pid


def run_postprocess(
    pred_dir,
    strategies: Sequence[PostprocessStrategy],
    truth_source,
    baseline: Union[MetricsTable, str, Path],
    out_dir,
    specs: Optional[Sequence[ClassSpec]] = None,
    metrics: Sequence[str] = DEFAULT_METRICS,
    workers: int = 1,
    tolerance: float = DEFAULT_SURFACE_TOLERANCE,
    weights: Optional[Mapping] = None,
) -> tuple[Path, MetricsTable, float]:
    """Postprocess every prediction, re-evaluate, and score against ``baseline``.

    A baseline read from CSV carries 4-decimal values, so the new table goes
    through the same CSV round trip before comparison.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from_csv = not isinstance(baseline, MetricsTable)
    if from_csv:
        baseline = read_results_csv(baseline)
    ids = [pid for pid in baseline.ids if prediction_path(pred_dir, pid) is not None]
    missing = sorted(set(baseline.ids) - set(ids))
    if missing:
        log.warning("no prediction for %s; these stay missing after postprocessing", missing)
    map_ordered(_PostprocessJob(str(pred_dir), str(out_dir), list(strategies)), ids, workers)

    table = evaluate_run(
        out_dir, truth_source, specs, metrics, workers=workers, tolerance=tolerance, ids=baseline.ids
    )
    csv_path = out_dir / "results.csv"
    write_results_csv(table, csv_path)
    compare = read_results_csv(csv_path) if from_csv else table
    return out_dir, table, improvement_score(baseline, compare, weights)
