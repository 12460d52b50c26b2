"""Sliding-window inference with Gaussian blending, flip TTA, ensembling and
restoration of label maps to the original image geometry.

Blending happens in probability space. Accumulators are float64 and windows
are reduced in a fixed order, so outputs do not depend on scheduling.
"""

from __future__ import annotations

import abc
import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analyzer import PipelineConfig
from .errors import EmptyList, PatientError, PredictorShapeError, ProvenanceMissing, ShapeMismatch
from .nifti import read_nifti, write_nifti
from .parallel import map_ordered
from .preprocess import PreprocessedExample, Provenance, load_example, nearest_resize, preprocess_volumes
from .volume import CONTINUOUS, LABELS, BoundingBox, Volume, pad_widths, reorient

log = logging.getLogger(__name__)

MIN_WEIGHT = 1e-6


# predictors


class PatchPredictor(abc.ABC):
    """Maps a (channels, px, py, pz) patch to (labels, px, py, pz) probabilities."""

    n_channels_in: int
    n_labels_out: int
    needs_mask = False

    @abc.abstractmethod
    def predict(self, patch: np.ndarray) -> np.ndarray: ...


class ConstantPredictor(PatchPredictor):
    def __init__(self, n_channels_in: int, n_labels_out: int, probs=None):
        self.n_channels_in = n_channels_in
        self.n_labels_out = n_labels_out
        if probs is None:
            probs = np.full(n_labels_out, 1.0 / n_labels_out)
        self.probs = np.asarray(probs, dtype=np.float32)
        if self.probs.shape != (n_labels_out,) or abs(float(self.probs.sum()) - 1) > 1e-4:
            raise ValueError("probs must be a distribution over the labels")

    def predict(self, patch):
        out = np.empty((self.n_labels_out, *patch.shape[1:]), dtype=np.float32)
        out[:] = self.probs[:, None, None, None]
        return out


class ThresholdPredictor(PatchPredictor):
    """Label index 1 where channel 0 exceeds ``threshold``, else index 0."""

    def __init__(self, n_channels_in: int, n_labels_out: int, threshold: float = 0.0):
        if n_labels_out < 2:
            raise ValueError("threshold predictor needs at least two labels")
        self.n_channels_in = n_channels_in
        self.n_labels_out = n_labels_out
        self.threshold = float(threshold)

    def predict(self, patch):
        hit = patch[0] > self.threshold
        out = np.zeros((self.n_labels_out, *patch.shape[1:]), dtype=np.float32)
        out[0] = ~hit
        out[1] = hit
        return out


class OraclePredictor(PatchPredictor):
    """One-hot of the truth mask, which is fed in as the last input channel.

    Reading the mask from the input keeps the oracle consistent under flips
    and padding (padded voxels read as label 0).
    """

    needs_mask = True

    def __init__(self, n_image_channels: int, labels: Sequence[int]):
        self.labels = np.asarray(sorted(int(l) for l in labels))
        self.n_channels_in = n_image_channels + 1
        self.n_labels_out = len(self.labels)

    def predict(self, patch):
        values = np.rint(patch[-1]).astype(np.int64)
        index = np.searchsorted(self.labels, values)
        index = np.clip(index, 0, len(self.labels) - 1)
        bad = self.labels[index] != values
        if bad.any():
            raise PredictorShapeError(f"oracle mask holds undeclared labels {np.unique(values[bad])}")
        out = np.zeros((self.n_labels_out, *patch.shape[1:]), dtype=np.float32)
        np.put_along_axis(out, index[np.newaxis], 1.0, axis=0)
        return out


def make_predictor(spec: str, n_image_channels: int, labels: Sequence[int]) -> PatchPredictor:
    """Build a predictor from ``oracle``, ``constant`` or ``threshold[:t]``."""
    name, _, arg = spec.partition(":")
    if name == "oracle":
        return OraclePredictor(n_image_channels, labels)
    if name == "constant":
        return ConstantPredictor(n_image_channels, len(labels))
    if name == "threshold":
        return ThresholdPredictor(n_image_channels, len(labels), float(arg) if arg else 0.0)
    raise ValueError(f"unknown predictor {spec!r}")


# blending


@dataclass(frozen=True)
class BlendSpec:
    patch_size: tuple
    overlap: float = 0.5
    sigma_scale: float = 0.125

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError(f"invalid patch size {self.patch_size}")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must be in [0, 1)")
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be positive")


def gaussian_importance(patch_size, sigma_scale: float = 0.125) -> np.ndarray:
    """Separable Gaussian centred on the patch midpoint, sigma = sigma_scale * size per axis.

    Normalised to a maximum of 1 and floored at 1e-6.
    """
    weights = np.ones((), dtype=np.float64)
    for p in patch_size:
        p = int(p)
        center = (p - 1) / 2.0
        sigma = sigma_scale * p
        g = np.exp(-0.5 * ((np.arange(p) - center) / sigma) ** 2)
        weights = np.multiply.outer(weights, g)
    weights = weights / weights.max()
    return np.maximum(weights, MIN_WEIGHT)


def window_origins(volume_shape, patch_size, overlap: float = 0.5) -> list[tuple]:
    """Window start indices per axis (last window clamped to the far edge), as a product."""
    per_axis = []
    for n, p in zip(volume_shape, patch_size):
        n, p = int(n), int(p)
        if n < p:
            raise ValueError(f"volume axis {n} smaller than patch {p}; pad first")
        stride = max(1, math.ceil(round(p * (1.0 - overlap), 9)))
        starts = list(range(0, n - p + 1, stride))
        if starts[-1] + p < n:
            starts.append(n - p)
        per_axis.append(starts)
    return list(itertools.product(*per_axis))


def _as_array(image) -> np.ndarray:
    return image.data if isinstance(image, Volume) else np.asarray(image)


def _sliding_window_raw(data: np.ndarray, predictor: PatchPredictor, spec: BlendSpec) -> np.ndarray:
    if data.shape[0] != predictor.n_channels_in:
        raise PredictorShapeError(
            f"input has {data.shape[0]} channels, predictor expects {predictor.n_channels_in}"
        )
    shape = data.shape[1:]
    widths = pad_widths(shape, spec.patch_size)
    padded = np.pad(data, [(0, 0), *widths], mode="constant", constant_values=0)
    pshape = padded.shape[1:]
    weights = gaussian_importance(spec.patch_size, spec.sigma_scale)
    acc = np.zeros((predictor.n_labels_out, *pshape), dtype=np.float64)
    norm = np.zeros(pshape, dtype=np.float64)
    expected = (predictor.n_labels_out, *spec.patch_size)
    for origin in window_origins(pshape, spec.patch_size, spec.overlap):
        window = tuple(slice(o, o + p) for o, p in zip(origin, spec.patch_size))
        probs = np.asarray(predictor.predict(padded[(slice(None), *window)]))
        if probs.shape != expected:
            raise PredictorShapeError(f"predictor returned {probs.shape}, expected {expected}")
        acc[(slice(None), *window)] += weights * probs
        norm[window] += weights
    acc /= norm
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, shape))
    return acc[(slice(None), *crop)]


def sliding_window_predict(image, predictor: PatchPredictor, spec: BlendSpec):
    """Gaussian-blended probabilities over overlapping windows; returns float32.

    Accepts a Volume (returns a Volume with the same geometry) or a
    (channels, x, y, z) array.
    """
    probs = _sliding_window_raw(_as_array(image), predictor, spec).astype(np.float32)
    if isinstance(image, Volume):
        return image.replace(data=probs, kind=CONTINUOUS)
    return probs


def flip_sets(all_combinations: bool = False) -> list[tuple]:
    if all_combinations:
        return [c for r in range(4) for c in itertools.combinations(range(3), r)]
    return [(), (0,), (1,), (2,)]


def tta_predict(image, predictor: PatchPredictor, spec: BlendSpec, all_combinations: bool = False):
    """Average of predictions on the identity and flipped inputs, each flipped back."""
    data = _as_array(image)
    flips = flip_sets(all_combinations)
    total = None
    for axes in flips:
        spatial = tuple(a + 1 for a in axes)
        flipped = np.flip(data, axis=spatial) if axes else data
        probs = _sliding_window_raw(np.ascontiguousarray(flipped), predictor, spec)
        probs = np.flip(probs, axis=spatial) if axes else probs
        total = probs if total is None else total + probs
    out = (total / len(flips)).astype(np.float32)
    if isinstance(image, Volume):
        return image.replace(data=out, kind=CONTINUOUS)
    return out


def ensemble(probs: Sequence):
    """Voxelwise mean of several probability maps."""
    if not probs:
        raise EmptyList("nothing to ensemble")
    arrays = [_as_array(p) for p in probs]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ShapeMismatch("probability maps differ in shape")
    total = np.zeros(arrays[0].shape, dtype=np.float64)
    for a in arrays:
        total += a
    out = (total / len(arrays)).astype(np.float32)
    if isinstance(probs[0], Volume):
        return probs[0].replace(data=out)
    return out


# restoring original geometry


def _label_dtype(labels) -> np.dtype:
    return np.dtype(np.uint8 if max(labels) < 256 else np.int32)


def finalize(prob, provenance: Optional[Provenance], labels: Sequence[int]) -> Volume:
    """Argmax (ties -> smaller label), then undo resampling, reorientation and cropping."""
    if provenance is None:
        raise ProvenanceMissing("finalize needs the preprocessing provenance")
    labels = sorted(int(l) for l in labels)
    data = _as_array(prob)
    if data.shape[0] != len(labels):
        raise ShapeMismatch(f"{data.shape[0]} probability channels for {len(labels)} labels")
    if tuple(data.shape[1:]) != tuple(provenance.resampled_shape):
        raise ShapeMismatch(f"probabilities {data.shape[1:]} vs provenance {provenance.resampled_shape}")
    label_map = np.asarray(labels, dtype=_label_dtype(labels))[np.argmax(data, axis=0)]

    original = dict(
        spacing=provenance.original_spacing,
        origin=provenance.original_origin,
        direction=np.asarray(provenance.original_direction),
        kind=LABELS,
    )
    if provenance.skipped:
        return Volume(data=label_map, **original)

    restored = nearest_resize(
        label_map, provenance.target_spacing, provenance.oriented_spacing, provenance.oriented_shape
    )
    oriented = Volume(
        data=restored,
        spacing=provenance.oriented_spacing,
        origin=provenance.oriented_origin,
        direction=np.asarray(provenance.oriented_direction),
        kind=LABELS,
    )
    native = reorient(oriented, provenance.source_orientation).array
    full = np.zeros(provenance.original_shape, dtype=label_map.dtype)
    box = (
        BoundingBox.from_json(provenance.crop_box)
        if provenance.crop_box
        else BoundingBox.full(provenance.original_shape)
    )
    if native.shape != box.shape:
        raise ShapeMismatch(f"restored shape {native.shape} does not fit crop box {box.shape}")
    full[box.slices] = native
    return Volume(data=full, **original)


# patient-level driver


def predictor_input(example: PreprocessedExample, predictor: PatchPredictor) -> np.ndarray:
    data = example.image.data
    if predictor.needs_mask:
        if example.mask is None:
            raise PredictorShapeError(f"patient {example.id}: oracle predictor needs a mask")
        data = np.concatenate([data, example.mask.data.astype(np.float32)], axis=0)
    return data


def predict_example(
    example: PreprocessedExample,
    predictors: Sequence[PatchPredictor],
    spec: BlendSpec,
    tta: bool = True,
    all_flips: bool = False,
) -> np.ndarray:
    probs = []
    for predictor in predictors:
        data = predictor_input(example, predictor)
        if tta:
            probs.append(tta_predict(data, predictor, spec, all_flips))
        else:
            probs.append(sliding_window_predict(data, predictor, spec))
    return ensemble(probs)


@dataclass(frozen=True)
class InferenceCase:
    id: str
    images: tuple
    mask: Optional[Path] = None


def read_listing(path, channels: Sequence[str]) -> list[InferenceCase]:
    """Parse a CSV (``id``, one column per channel, optional ``mask``) or JSON listing.

    JSON may be ``{id: {channel: path, ..., "mask": path}}`` or a list of
    objects with an ``id`` key. Relative paths resolve against the listing.
    """
    path = Path(path)
    base = path.parent
    if path.suffix.lower() == ".json":
        raw = json.loads(path.read_text())
        entries = [dict(v, id=k) for k, v in raw.items()] if isinstance(raw, dict) else raw
    else:
        with path.open(newline="") as fh:
            entries = list(csv.DictReader(fh))

    def resolve(value):
        if value is None or str(value).strip() == "":
            return None
        p = Path(str(value).strip())
        return p if p.is_absolute() else base / p

    cases = []
    for entry in entries:
        pid = str(entry["id"])
        missing = [c for c in channels if c not in entry]
        if missing:
            raise ValueError(f"listing entry {pid} lacks channels {missing}")
        cases.append(
            InferenceCase(pid, tuple(resolve(entry[c]) for c in channels), resolve(entry.get("mask")))
        )
    return sorted(cases, key=lambda c: c.id)


class _InferenceJob:
    def __init__(self, config, predictors, spec, out_dir, tta, all_flips):
        self.config = config
        self.predictors = predictors
        self.spec = spec
        self.out_dir = out_dir
        self.tta = tta
        self.all_flips = all_flips

    def __call__(self, case: InferenceCase) -> str:
        try:
            vols = [read_nifti(p) for p in case.images]
            image = vols[0].replace(data=np.concatenate([v.data.astype(np.float32) for v in vols]))
            mask = read_nifti(case.mask, kind=LABELS) if case.mask is not None else None
            if mask is not None and mask.data.dtype.kind == "f":
                mask = mask.replace(data=mask.data.astype(np.int32))
            example = preprocess_volumes(case.id, image, mask, self.config)
            probs = predict_example(example, self.predictors, self.spec, self.tta, self.all_flips)
            label_vol = finalize(probs, example.provenance, self.config.labels)
            write_nifti(label_vol, Path(self.out_dir) / f"{case.id}.nii.gz")
        except Exception as exc:
            raise PatientError(case.id, "predict", exc) from exc
        return case.id


def blend_spec_for(config: PipelineConfig, overlap: float = 0.5, sigma_scale: float = 0.125) -> BlendSpec:
    return BlendSpec(tuple(config.patch_size), overlap, sigma_scale)


def run_inference(
    inputs,
    config: PipelineConfig,
    predictors: Sequence[PatchPredictor],
    out_dir,
    spec: Optional[BlendSpec] = None,
    tta: bool = True,
    all_flips: bool = False,
    workers: int = 1,
) -> tuple[list[str], list[PatientError]]:
    """Predict every listed case and write ``<out_dir>/<id>.nii.gz``.

    Per-patient failures are logged and returned; other patients still run.
    """
    if not predictors:
        raise EmptyList("at least one predictor is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = read_listing(inputs, config.channels) if not isinstance(inputs, list) else inputs
    spec = spec or blend_spec_for(config)
    job = _InferenceJob(config, list(predictors), spec, str(out_dir), tta, all_flips)
    return _collect(cases, map_ordered(job, cases, workers, return_exceptions=True))


def _collect(cases, outcomes):
    done, failed = [], []
    for case, outcome in zip(cases, outcomes):
        if isinstance(outcome, Exception):
            err = outcome if isinstance(outcome, PatientError) else PatientError(case.id, "predict", outcome)
            log.warning("%s", err.cause, extra={"patient": err.patient_id, "stage": err.stage})
            failed.append(err)
        else:
            done.append(outcome)
    return done, failed


class _PreprocessedJob:
    def __init__(self, results_dir, config, predictors, spec, out_dir, tta, all_flips):
        self.results_dir = results_dir
        self.config = config
        self.predictors = predictors
        self.spec = spec
        self.out_dir = out_dir
        self.tta = tta
        self.all_flips = all_flips

    def __call__(self, pid: str) -> str:
        try:
            example = load_example(self.results_dir, pid)
            probs = predict_example(example, self.predictors, self.spec, self.tta, self.all_flips)
            label_vol = finalize(probs, example.provenance, self.config.labels)
            write_nifti(label_vol, Path(self.out_dir) / f"{pid}.nii.gz")
        except Exception as exc:
            raise PatientError(pid, "predict", exc) from exc
        return pid


def predict_preprocessed(
    results_dir,
    ids: Sequence[str],
    config: PipelineConfig,
    predictors: Sequence[PatchPredictor],
    out_dir,
    spec: Optional[BlendSpec] = None,
    tta: bool = True,
    all_flips: bool = False,
    workers: int = 1,
) -> tuple[list[str], list[PatientError]]:
    """Like :func:`run_inference` but starting from ``<results>/preprocessed/<id>``."""
    if not predictors:
        raise EmptyList("at least one predictor is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = spec or blend_spec_for(config)
    ids = sorted(ids)
    job = _PreprocessedJob(str(results_dir), config, list(predictors), spec, str(out_dir), tta, all_flips)
    cases = [InferenceCase(i, ()) for i in ids]
    return _collect(cases, map_ordered(job, ids, workers, return_exceptions=True))
