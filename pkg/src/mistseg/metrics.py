"""Segmentation metrics on binary class masks: Dice, HD95, ASD and surface Dice.

Surface voxels are object voxels with a 6-neighbour in the background or on
the grid edge. Distances are exact Euclidean distances in mm between surface
voxel centres. HD95 and ASD pool both directed distance sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptySurface, GeometryMismatch, ShapeMismatch
from .volume import Volume, diagonal_mm

METRICS = ("dice", "hd95", "asd", "surf_dice")
HIGHER_IS_BETTER = {"dice": True, "surf_dice": True, "hd95": False, "asd": False}
DEFAULT_METRICS = ("dice", "hd95")
DEFAULT_SURFACE_TOLERANCE = 1.0
_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ClassSpec:
    name: str
    labels: frozenset

    def __post_init__(self):
        if not self.name:
            raise ValueError("class name must be nonempty")
        labels = frozenset(int(l) for l in self.labels)
        if not labels:
            raise ValueError(f"class {self.name} has no labels")
        object.__setattr__(self, "labels", labels)


def class_specs(final_classes: Mapping[str, Iterable[int]]) -> list[ClassSpec]:
    return [ClassSpec(name, frozenset(labels)) for name, labels in final_classes.items()]


def _array(mask) -> np.ndarray:
    if isinstance(mask, Volume):
        return mask.array
    return np.asarray(mask)


def compose_class(mask, spec: ClassSpec) -> np.ndarray:
    """Boolean mask of voxels whose label belongs to ``spec``."""
    return np.isin(_array(mask), sorted(spec.labels))


def dice(pred, truth) -> float:
    p, t = _array(pred).astype(bool), _array(truth).astype(bool)
    if p.shape != t.shape:
        raise ShapeMismatch(f"{p.shape} vs {t.shape}")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def surface_voxels(obj: np.ndarray) -> np.ndarray:
    eroded = ndimage.binary_erosion(obj, structure=_SIX, border_value=0)
    return obj & ~eroded


@dataclass
class SurfaceDistanceSet:
    d_pred_to_truth: np.ndarray
    d_truth_to_pred: np.ndarray
    spacing: tuple

    @property
    def pooled(self) -> np.ndarray:
        # sorted so pooled statistics do not depend on which side is the prediction
        return np.sort(np.concatenate([self.d_pred_to_truth, self.d_truth_to_pred]))


def surface_distances(pred, truth, spacing=(1.0, 1.0, 1.0)) -> SurfaceDistanceSet:
    p, t = _array(pred).astype(bool), _array(truth).astype(bool)
    if p.shape != t.shape:
        raise ShapeMismatch(f"{p.shape} vs {t.shape}")
    sp, st = surface_voxels(p), surface_voxels(t)
    if not sp.any():
        raise EmptySurface("pred")
    if not st.any():
        raise EmptySurface("truth")
    spacing = tuple(float(s) for s in spacing)
    to_truth = ndimage.distance_transform_edt(~st, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return SurfaceDistanceSet(to_truth[sp], to_pred[st], spacing)


def hd95(sd: SurfaceDistanceSet) -> float:
    return float(np.percentile(sd.pooled, 95))


def asd(sd: SurfaceDistanceSet) -> float:
    pooled = sd.pooled
    return math.fsum(pooled) / pooled.size


def surface_dice(sd: SurfaceDistanceSet, tolerance: float = DEFAULT_SURFACE_TOLERANCE) -> float:
    within = int(np.sum(sd.d_pred_to_truth <= tolerance)) + int(np.sum(sd.d_truth_to_pred <= tolerance))
    return within / (sd.d_pred_to_truth.size + sd.d_truth_to_pred.size)


def worst_case(metric: str, diagonal: float) -> float:
    return {"dice": 0.0, "surf_dice": 0.0, "hd95": diagonal, "asd": diagonal}[metric]


def best_case(metric: str) -> float:
    return {"dice": 1.0, "surf_dice": 1.0, "hd95": 0.0, "asd": 0.0}[metric]


def binary_metrics(
    p: np.ndarray,
    t: np.ndarray,
    metrics: Sequence[str],
    spacing,
    tolerance: float = DEFAULT_SURFACE_TOLERANCE,
) -> dict:
    """Metrics for one class, applying the empty-mask policy."""
    p_any, t_any = bool(p.any()), bool(t.any())
    out = {}
    if not p_any or not t_any:
        diag = diagonal_mm(p.shape, spacing)
        for m in metrics:
            out[m] = best_case(m) if p_any == t_any else worst_case(m, diag)
        return out
    sd = None
    for m in metrics:
        if m == "dice":
            out[m] = dice(p, t)
            continue
        if sd is None:
            sd = surface_distances(p, t, spacing)
        if m == "hd95":
            out[m] = hd95(sd)
        elif m == "asd":
            out[m] = asd(sd)
        elif m == "surf_dice":
            out[m] = surface_dice(sd, tolerance)
        else:
            raise ValueError(f"unknown metric {m!r}")
    return out


def evaluate_pair(
    pred_mask,
    truth_mask,
    specs: Sequence[ClassSpec],
    metrics: Sequence[str] = DEFAULT_METRICS,
    spacing=None,
    tolerance: float = DEFAULT_SURFACE_TOLERANCE,
) -> dict:
    """Map ``(class name, metric) -> value`` for one prediction/truth pair."""
    for m in metrics:
        if m not in METRICS:
            raise ValueError(f"unknown metric {m!r}")
    if isinstance(pred_mask, Volume) and isinstance(truth_mask, Volume):
        if not pred_mask.same_geometry(truth_mask, tol=1e-3):
            raise GeometryMismatch("prediction and truth geometry differ")
        if spacing is None:
            spacing = truth_mask.spacing
    p_arr, t_arr = _array(pred_mask), _array(truth_mask)
    if p_arr.shape != t_arr.shape:
        raise GeometryMismatch(f"shape {p_arr.shape} vs {t_arr.shape}")
    spacing = (1.0, 1.0, 1.0) if spacing is None else spacing
    out = {}
    for spec in specs:
        values = binary_metrics(
            compose_class(p_arr, spec), compose_class(t_arr, spec), metrics, spacing, tolerance
        )
        for m in metrics:
            out[(spec.name, m)] = values[m]
    return out
