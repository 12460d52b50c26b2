"""Per-patient preprocessing: crop, reorient, resample, window/normalize, distance maps."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .analyzer import (
    NORM_PERCENTILES,
    TARGET_ORIENTATION,
    PipelineConfig,
    foreground_mask,
    load_patient_images,
    resampled_shape,
    round_half_away,
)
from .dataset import PatientRecord
from .errors import NonPositiveSpacing, PatientError, UnknownLabel
from .nifti import read_nifti
from .parallel import map_ordered
from .tensorio import load_tensor, save_tensor
from .volume import (
    LABELS,
    BoundingBox,
    Volume,
    crop,
    diagonal_mm,
    orientation_of,
    reorient,
    tight_bbox,
)

log = logging.getLogger(__name__)

ANISOTROPY_RATIO = 3.0
MIN_STD = 1e-8
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


# resampling


def _check_spacing(target_spacing) -> np.ndarray:
    target = np.asarray(target_spacing, dtype=np.float64)
    if target.shape != (3,) or np.any(~(target > 0)):
        raise NonPositiveSpacing(f"target spacing must be positive, got {target_spacing}")
    return target


def _zoom(arr: np.ndarray, scale, out_shape, order: int) -> np.ndarray:
    """Sample ``arr`` at output index * scale (input index units), per axis."""
    return ndimage.affine_transform(
        arr,
        np.diag(np.asarray(scale, dtype=np.float64)),
        offset=0.0,
        output_shape=tuple(out_shape),
        order=order,
        mode="nearest",
        prefilter=order > 1,
        output=np.float64,
    )


def _resample_array(arr, spacing, target, out_shape, order: int) -> np.ndarray:
    spacing = np.asarray(spacing, dtype=np.float64)
    scale = target / spacing
    if spacing.max() / spacing.min() > ANISOTROPY_RATIO:
        low_res = int(np.argmax(spacing))
        first_scale = np.ones(3)
        first_scale[low_res] = scale[low_res]
        first_shape = list(arr.shape)
        first_shape[low_res] = out_shape[low_res]
        arr = _zoom(arr, first_scale, first_shape, order=0)
        second_scale = scale.copy()
        second_scale[low_res] = 1.0
        return _zoom(arr, second_scale, out_shape, order=order)
    return _zoom(arr, scale, out_shape, order=order)


def resample_image(v: Volume, target_spacing) -> Volume:
    """Cubic B-spline resampling (nearest along the coarse axis first when anisotropic)."""
    target = _check_spacing(target_spacing)
    out_shape = resampled_shape(v.shape, v.spacing, target)
    if np.array_equal(target, v.spacing) and out_shape == v.shape:
        return v.replace(data=v.data.astype(np.float32))
    data = np.stack(
        [_resample_array(c.astype(np.float64), v.spacing, target, out_shape, order=3) for c in v.data]
    ).astype(np.float32)
    return v.replace(data=data, spacing=tuple(target))


def resample_mask(m: Volume, labels: Sequence[int], target_spacing) -> Volume:
    """Linear interpolation of one-hot label channels followed by argmax (ties -> smaller label)."""
    target = _check_spacing(target_spacing)
    labels = sorted(int(l) for l in labels)
    arr = m.array
    present = np.unique(arr)
    unknown = sorted(set(present.tolist()) - set(labels))
    if unknown:
        raise UnknownLabel(unknown[0])
    out_shape = resampled_shape(m.shape, m.spacing, target)
    if np.array_equal(target, m.spacing) and out_shape == m.shape:
        return m
    best = np.full(out_shape, -np.inf)
    out = np.zeros(out_shape, dtype=_label_dtype(labels))
    for label in labels:
        if label not in present:
            continue
        channel = _resample_array((arr == label).astype(np.float64), m.spacing, target, out_shape, order=1)
        # strict comparison keeps the smaller label on ties
        better = channel > best
        out[better] = label
        best = np.where(better, channel, best)
    return m.replace(data=out[np.newaxis], spacing=tuple(target))


def _label_dtype(labels) -> np.dtype:
    top = max(labels) if labels else 0
    return np.dtype(np.uint8 if top < 256 else np.int32)


def nearest_resize(arr: np.ndarray, src_spacing, dst_spacing, dst_shape) -> np.ndarray:
    """Nearest-neighbour resampling by index lookup (used to undo resampling)."""
    index = []
    for axis in range(3):
        pos = np.arange(dst_shape[axis]) * (dst_spacing[axis] / src_spacing[axis])
        index.append(np.clip(round_half_away(pos), 0, arr.shape[axis] - 1))
    return arr[np.ix_(*index)]


# intensity


def window_normalize(image: Volume, config: PipelineConfig) -> Volume:
    """Clip and z-score every channel.

    CT uses the dataset window and statistics from ``config``. Other
    modalities use per-image percentiles and statistics, restricted to the
    nonzero voxels (and re-masked) when ``config.use_nonzero_mask`` is set.
    """
    out = np.empty(image.data.shape, dtype=np.float32)
    for c, channel in enumerate(image.data):
        x = channel.astype(np.float64)
        if config.modality == "ct":
            x = np.clip(x, config.window_lo, config.window_hi)
            mean, std = config.global_mean, config.global_std
            out[c] = (x - mean) / _safe_std(std)
            continue
        if config.use_nonzero_mask:
            nonzero = x != 0
            values = x[nonzero]
            if values.size == 0:
                out[c] = 0.0
                continue
            lo, hi = np.percentile(values, NORM_PERCENTILES)
            clipped = np.clip(values, lo, hi)
            mean, std = clipped.mean(), clipped.std()
            out[c] = (np.clip(x, lo, hi) - mean) / _safe_std(std) * nonzero
        else:
            lo, hi = np.percentile(x, NORM_PERCENTILES)
            x = np.clip(x, lo, hi)
            out[c] = (x - x.mean()) / _safe_std(x.std())
    return image.replace(data=out)


def _safe_std(std: float) -> float:
    if std < MIN_STD:
        log.warning("standard deviation %g below %g, clamping", std, MIN_STD)
        return MIN_STD
    return float(std)


# distance transform maps


def object_boundary(obj: np.ndarray) -> np.ndarray:
    """Object voxels with a 6-neighbour outside the object (grid edge does not count)."""
    eroded = ndimage.binary_erosion(obj, structure=SIX_CONNECTED, border_value=1)
    return obj & ~eroded


def signed_distance(obj: np.ndarray, spacing) -> np.ndarray:
    """Signed distance in mm: + outside, 0 on the boundary, - inside.

    Callers handle empty and full objects.
    """
    outside = ndimage.distance_transform_edt(~obj, sampling=spacing)
    inside = ndimage.distance_transform_edt(obj, sampling=spacing)
    dtm = np.where(obj, -inside, outside)
    dtm[object_boundary(obj)] = 0.0
    return dtm


def compute_dtm(mask: Volume, labels: Sequence[int], normalize: bool = False) -> Volume:
    """One signed distance channel per label, in physical units.

    An absent label gives the grid diagonal everywhere; a label filling the
    whole grid gives minus the diagonal.
    """
    arr = mask.array
    diag = diagonal_mm(mask.shape, mask.spacing)
    channels = []
    for label in labels:
        obj = arr == label
        if not obj.any():
            dtm = np.full(mask.shape, diag)
        elif obj.all():
            dtm = np.full(mask.shape, -diag)
        else:
            dtm = signed_distance(obj, mask.spacing)
        if normalize:
            pos, neg = dtm > 0, dtm < 0
            if pos.any():
                dtm = np.where(pos, dtm / dtm[pos].max(), dtm)
            if neg.any():
                dtm = np.where(neg, dtm / -dtm[neg].min(), dtm)
        channels.append(dtm)
    return mask.replace(data=np.stack(channels).astype(np.float64), kind="continuous")


# patient pipeline


@dataclass
class Provenance:
    id: str
    original_shape: tuple
    original_spacing: tuple
    original_origin: tuple
    original_direction: list
    crop_box: Optional[dict]
    source_orientation: str
    oriented_shape: tuple
    oriented_spacing: tuple
    oriented_origin: tuple
    oriented_direction: list
    resampled_shape: tuple
    target_spacing: tuple
    labels: tuple
    skipped: bool = False

    def to_json(self) -> dict:
        out = asdict(self)
        return json.loads(json.dumps(out))

    @classmethod
    def from_json(cls, obj) -> "Provenance":
        obj = dict(obj)
        for key in (
            "original_shape", "original_spacing", "original_origin", "oriented_shape",
            "oriented_spacing", "oriented_origin", "resampled_shape", "target_spacing", "labels",
        ):  # fmt: skip
            obj[key] = tuple(obj[key])
        return cls(**obj)


@dataclass
class PreprocessedExample:
    id: str
    image: Volume
    mask: Optional[Volume]
    dtm: Optional[Volume]
    provenance: Provenance


def preprocess_volumes(
    pid: str,
    image: Volume,
    mask: Optional[Volume],
    config: PipelineConfig,
    compute_dtms: bool = False,
    normalize_dtms: bool = False,
    skip: bool = False,
    bias_correction: bool = False,
) -> PreprocessedExample:
    original = image
    box = None
    if skip:
        image = image.replace(data=image.data.astype(np.float32))
    else:
        if config.crop_to_foreground:
            box = tight_bbox(foreground_mask(image))
            image = crop(image, box)
            mask = crop(mask, box) if mask is not None else None
        if bias_correction:
            log.warning("patient %s: bias correction is not implemented, passing through", pid)
    source_code = orientation_of(image.direction)
    if not skip:
        image = reorient(image, TARGET_ORIENTATION)
        mask = reorient(mask, TARGET_ORIENTATION) if mask is not None else None
    oriented = image
    if not skip:
        image = window_normalize(resample_image(image, config.target_spacing), config)
        if mask is not None:
            mask = resample_mask(mask, config.labels, config.target_spacing)
    dtm = None
    if compute_dtms and mask is not None:
        dtm = compute_dtm(mask, config.labels, normalize=normalize_dtms)

    provenance = Provenance(
        id=pid,
        original_shape=original.shape,
        original_spacing=original.spacing,
        original_origin=original.origin,
        original_direction=original.direction.tolist(),
        crop_box=box.to_json() if box is not None else None,
        source_orientation=source_code,
        oriented_shape=oriented.shape,
        oriented_spacing=oriented.spacing,
        oriented_origin=oriented.origin,
        oriented_direction=oriented.direction.tolist(),
        resampled_shape=image.shape,
        target_spacing=image.spacing,
        labels=tuple(config.labels),
        skipped=skip,
    )
    return PreprocessedExample(pid, image, mask, dtm, provenance)


def preprocess_patient(
    rec: PatientRecord,
    config: PipelineConfig,
    compute_dtms: bool = False,
    normalize_dtms: bool = False,
    skip: bool = False,
    bias_correction: bool = False,
) -> PreprocessedExample:
    stage = "load"
    try:
        image = load_patient_images(rec)
        mask = read_nifti(rec.mask_path, kind=LABELS) if rec.mask_path is not None else None
        if mask is not None and mask.data.dtype.kind == "f":
            mask = mask.replace(data=mask.data.astype(np.int32))
        stage = "preprocess"
        return preprocess_volumes(
            rec.id, image, mask, config, compute_dtms, normalize_dtms, skip, bias_correction
        )
    except PatientError:
        raise
    except Exception as exc:
        raise PatientError(rec.id, stage, exc) from exc


# dataset-level driver and on-disk layout


def example_dir(results_dir, pid: str) -> Path:
    return Path(results_dir) / "preprocessed" / pid


def save_example(example: PreprocessedExample, results_dir) -> Path:
    out = example_dir(results_dir, example.id)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(example.image, out / "image.mstn")
    if example.mask is not None:
        save_tensor(example.mask, out / "mask.mstn")
    if example.dtm is not None:
        save_tensor(example.dtm, out / "dtm.mstn")
    (out / "provenance.json").write_text(json.dumps(example.provenance.to_json(), indent=2) + "\n")
    return out


def load_example(results_dir, pid: str) -> PreprocessedExample:
    d = example_dir(results_dir, pid)
    provenance = Provenance.from_json(json.loads((d / "provenance.json").read_text()))
    mask = load_tensor(d / "mask.mstn") if (d / "mask.mstn").exists() else None
    dtm = load_tensor(d / "dtm.mstn") if (d / "dtm.mstn").exists() else None
    return PreprocessedExample(pid, load_tensor(d / "image.mstn"), mask, dtm, provenance)


class _PreprocessJob:
    def __init__(self, config, results_dir, options):
        self.config = config
        self.results_dir = results_dir
        self.options = options

    def __call__(self, rec: PatientRecord) -> str:
        example = preprocess_patient(rec, self.config, **self.options)
        save_example(example, self.results_dir)
        return rec.id


def preprocess_dataset(
    patients: Sequence[PatientRecord],
    config: PipelineConfig,
    results_dir,
    workers: int = 1,
    compute_dtms: bool = False,
    normalize_dtms: bool = False,
    skip: bool = False,
    bias_correction: bool = False,
) -> tuple[list[str], list[PatientError]]:
    """Preprocess every patient listed in ``config.patient_ids``; returns (done ids, failures)."""
    wanted = set(config.patient_ids) if config.patient_ids else None
    patients = sorted(
        (p for p in patients if wanted is None or p.id in wanted), key=lambda r: r.id
    )
    (Path(results_dir) / "preprocessed").mkdir(parents=True, exist_ok=True)
    job = _PreprocessJob(
        config,
        str(results_dir),
        dict(
            compute_dtms=compute_dtms,
            normalize_dtms=normalize_dtms,
            skip=skip,
            bias_correction=bias_correction,
        ),
    )
    outcomes = map_ordered(job, patients, workers, return_exceptions=True)
    done, failed = [], []
    for rec, outcome in zip(patients, outcomes):
        if isinstance(outcome, Exception):
            err = outcome if isinstance(outcome, PatientError) else PatientError(rec.id, "preprocess", outcome)
            log.warning("%s", err.cause, extra={"patient": err.patient_id, "stage": err.stage})
            failed.append(err)
        else:
            done.append(outcome)
    return done, failed
