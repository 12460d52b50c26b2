"""Rule-based dataset analysis producing ``config.json``.

All percentiles use linear interpolation between closest ranks
(``numpy.percentile`` default).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import DatasetDescription, PatientRecord, discover_patients
from .errors import EmptyHistogram, NoForegroundVoxels, NoUsablePatients
from .nifti import read_nifti, read_nifti_header
from .parallel import map_ordered
from .volume import LABELS, CONTINUOUS, Volume, orientation_of, tight_bbox

log = logging.getLogger(__name__)

CONFIG_VERSION = 1

CROP_WINDOW_PERCENTILES = (33.0, 99.5)
CROP_REDUCTION_THRESHOLD = Fraction(1, 5)
OTSU_BINS = 256
ANISOTROPY_RATIO = 3.0
ANISOTROPIC_SPACING_PERCENTILE = 10.0
MEMORY_LIMIT_BYTES = 2 * 2**30
BYTES_PER_VOXEL = 4
NORM_PERCENTILES = (0.5, 99.5)
NONZERO_RATIO_THRESHOLD = 0.2
DEFAULT_MAX_PATCH_SIZE = (256, 256, 256)
HEADER_TOLERANCE = 1e-3
TARGET_ORIENTATION = "RAI"


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


@dataclass
class PipelineConfig:
    crop_to_foreground: bool
    mean_volume_reduction: float
    target_spacing: tuple
    patch_size: tuple
    modality: str
    labels: tuple
    final_classes: dict
    channels: tuple
    max_patch_size: tuple = DEFAULT_MAX_PATCH_SIZE
    median_resampled_shape: Optional[tuple] = None
    window_lo: Optional[float] = None
    window_hi: Optional[float] = None
    global_mean: Optional[float] = None
    global_std: Optional[float] = None
    use_nonzero_mask: bool = False
    patient_ids: tuple = ()
    excluded_ids: tuple = ()
    memory_warning: bool = False
    version: int = CONFIG_VERSION

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.max_patch_size = tuple(int(p) for p in self.max_patch_size)
        self.labels = tuple(int(l) for l in self.labels)
        self.channels = tuple(self.channels)
        self.patient_ids = tuple(self.patient_ids)
        self.excluded_ids = tuple(self.excluded_ids)
        self.final_classes = {k: tuple(sorted(int(l) for l in v)) for k, v in self.final_classes.items()}
        if self.median_resampled_shape is not None:
            self.median_resampled_shape = tuple(int(s) for s in self.median_resampled_shape)
        if any(not s > 0 for s in self.target_spacing):
            raise ValueError(f"target spacing must be positive: {self.target_spacing}")
        for p, cap in zip(self.patch_size, self.max_patch_size):
            if p < 1 or p & (p - 1) or p > cap:
                raise ValueError(f"patch size {self.patch_size} invalid for cap {self.max_patch_size}")
        if self.window_lo is not None and self.window_hi is not None and not self.window_lo < self.window_hi:
            raise ValueError("window_lo must be below window_hi")
        if self.global_std is not None and not self.global_std > 0:
            raise ValueError("global_std must be positive")

    def to_json(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        out["final_classes"] = {k: list(v) for k, v in self.final_classes.items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        version = obj.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


# foreground / otsu


def otsu_threshold(histogram, bin_edges) -> float:
    """Bin-centre threshold maximising between-class variance.

    A candidate at bin ``k`` splits the histogram into bins ``< k`` and
    ``>= k``. Ties go to the lowest ``k``. A histogram with a single occupied
    bin returns that bin's centre.
    """
    counts = np.asarray(histogram, dtype=np.float64)
    edges = np.asarray(bin_edges, dtype=np.float64)
    if counts.ndim != 1 or edges.shape != (counts.size + 1,):
        raise ValueError("bin_edges must have one more entry than histogram")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise EmptyHistogram("histogram has no mass")
    centers = (edges[:-1] + edges[1:]) / 2
    occupied = np.flatnonzero(counts)
    if occupied.size == 1:
        return float(centers[occupied[0]])

    widths = np.diff(edges)
    uniform = np.allclose(widths, widths[0], rtol=1e-9, atol=0)
    if uniform and np.all(counts == np.round(counts)):
        # between-class variance in bin-index units is
        # (S0*n1 - S1*n0)^2 / (n0*n1*N^2); integers keep comparisons exact
        n = [int(c) for c in counts]
        total_n = sum(n)
        total_s = sum(k * c for k, c in enumerate(n))
        best_k, best_num, best_den = None, 0, 1
        n0 = s0 = 0
        for k in range(1, len(n)):
            n0 += n[k - 1]
            s0 += (k - 1) * n[k - 1]
            n1 = total_n - n0
            if n0 == 0 or n1 == 0:
                continue
            num = (s0 * n1 - (total_s - s0) * n0) ** 2
            den = n0 * n1
            if best_k is None or num * best_den > best_num * den:
                best_k, best_num, best_den = k, num, den
        return float(centers[best_k])

    w = counts / counts.sum()
    w0 = np.cumsum(w)[:-1]
    m0 = np.cumsum(w * centers)[:-1]
    mt = m0[-1] + w[-1] * centers[-1]
    w1 = 1.0 - w0
    valid = (np.cumsum(counts)[:-1] > 0) & (np.cumsum(counts[::-1])[::-1][1:] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        var = (mt * w0 - m0) ** 2 / (w0 * w1)
    var = np.where(valid, var, -np.inf)
    return float(centers[int(np.argmax(var)) + 1])


def foreground_mask(image: Volume, bins: int = OTSU_BINS) -> Volume:
    """Window to the 33rd/99.5th percentiles, Otsu-threshold, keep voxels >= threshold.

    Multi-channel input returns the union of the per-channel masks.
    """
    mask = np.zeros(image.shape, dtype=bool)
    for channel in image.data:
        x = np.asarray(channel, dtype=np.float64)
        lo, hi = np.percentile(x, CROP_WINDOW_PERCENTILES)
        if not hi > lo:
            log.warning("constant image window (%g), foreground is the whole volume", lo)
            mask[:] = True
            continue
        clipped = np.clip(x, lo, hi)
        hist, edges = np.histogram(clipped, bins=bins, range=(lo, hi))
        mask |= clipped >= otsu_threshold(hist, edges)
    return image.replace(data=mask.astype(np.uint8)[np.newaxis], kind=LABELS)


# per-patient statistics


@dataclass
class PatientStats:
    id: str
    ok: bool
    reason: str = ""
    shape: tuple = ()  # in target orientation
    spacing: tuple = ()  # in target orientation
    bbox_shape: tuple = ()  # in target orientation
    reduction: Fraction = Fraction(0)
    nonzero_ratios: tuple = ()
    foreground_values: Optional[np.ndarray] = field(default=None, repr=False)


def check_headers(rec: PatientRecord, tol: float = HEADER_TOLERANCE) -> tuple[bool, str]:
    """Compare shape/spacing/origin/direction across all channels and the mask.

    Returns ``(True, "")`` or ``(False, reason)``; the reason names the patient.
    """
    paths = list(rec.image_paths) + ([rec.mask_path] if rec.mask_path is not None else [])
    try:
        headers = [read_nifti_header(p) for p in paths]
    except Exception as exc:  # noqa: BLE001
        reason = f"patient {rec.id}: unreadable ({exc})"
        log.warning(reason, extra={"patient": rec.id})
        return False, reason
    ref, ref_path = headers[0], paths[0]
    for hdr, path in zip(headers[1:], paths[1:]):
        problems = []
        if hdr.shape != ref.shape:
            problems.append(f"shape {hdr.shape} != {ref.shape}")
        if hdr.channels != 1:
            problems.append(f"{hdr.channels} channels in one file")
        if not np.allclose(hdr.spacing, ref.spacing, rtol=0, atol=tol):
            problems.append(f"spacing {hdr.spacing} != {ref.spacing}")
        if not np.allclose(hdr.origin, ref.origin, rtol=0, atol=tol):
            problems.append(f"origin {hdr.origin} != {ref.origin}")
        if not np.allclose(hdr.direction, ref.direction, rtol=0, atol=tol):
            problems.append("direction differs")
        if problems:
            reason = f"patient {rec.id}: {path.name} vs {ref_path.name}: " + "; ".join(problems)
            log.warning("excluding %s", reason, extra={"patient": rec.id})
            return False, reason
    if ref.channels != 1:
        reason = f"patient {rec.id}: {ref_path.name} has {ref.channels} channels"
        log.warning("excluding %s", reason, extra={"patient": rec.id})
        return False, reason
    return True, ""


def _target_axis_order(direction) -> list[int]:
    """Source axis feeding each axis after reorientation to the target code."""
    code = orientation_of(direction)
    world = {"R": 0, "L": 0, "A": 1, "P": 1, "I": 2, "S": 2}
    src_world = [world[c] for c in code]
    return [src_world.index(world[c]) for c in TARGET_ORIENTATION]


def load_patient_images(rec: PatientRecord) -> Volume:
    vols = [read_nifti(p) for p in rec.image_paths]
    data = np.concatenate([v.data.astype(np.float32) for v in vols], axis=0)
    return vols[0].replace(data=data)


def patient_stats(rec: PatientRecord, modality: str, check: bool = True) -> PatientStats:
    if check:
        ok, reason = check_headers(rec)
        if not ok:
            return PatientStats(rec.id, False, reason)
    try:
        image = load_patient_images(rec)
        fg = foreground_mask(image)
        box = tight_bbox(fg)
        order = _target_axis_order(image.direction)
        full = int(np.prod(image.shape))
        ratios = []
        for channel in image.data:
            nonzero = int(np.count_nonzero(channel))
            zero = channel.size - nonzero
            ratios.append(nonzero / zero if zero else float("inf"))
        values = None
        if modality == "ct":
            if rec.mask_path is None:
                raise NoForegroundVoxels(f"patient {rec.id}: CT statistics need a mask")
            truth = read_nifti(rec.mask_path, kind=LABELS).array
            values = image.data[:, truth != 0].ravel().astype(np.float64)
    except Exception as exc:  # noqa: BLE001
        reason = f"patient {rec.id}: unreadable ({exc})"
        log.warning(reason, extra={"patient": rec.id})
        return PatientStats(rec.id, False, reason)
    return PatientStats(
        id=rec.id,
        ok=True,
        shape=tuple(image.shape[a] for a in order),
        spacing=tuple(image.spacing[a] for a in order),
        bbox_shape=tuple(box.shape[a] for a in order),
        reduction=Fraction(full - box.size, full),
        nonzero_ratios=tuple(ratios),
        foreground_values=values,
    )


def _gather_stats(patients, modality: str, workers: int, check: bool) -> list[PatientStats]:
    patients = sorted(patients, key=lambda r: r.id)
    stats = map_ordered(_StatsJob(modality, check), patients, workers)
    return stats


class _StatsJob:
    def __init__(self, modality: str, check: bool):
        self.modality = modality
        self.check = check

    def __call__(self, rec):
        return patient_stats(rec, self.modality, self.check)


# dataset-level rules


def crop_decision(reductions: Sequence) -> tuple[bool, float]:
    """Crop when the mean fractional volume reduction is at least 20%."""
    if not reductions:
        raise NoUsablePatients("no readable patients for the cropping decision")
    mean = sum(Fraction(r) for r in reductions) / len(reductions)
    return mean >= CROP_REDUCTION_THRESHOLD, float(mean)


def decide_cropping(patients, desc: DatasetDescription, workers: int = 1) -> tuple[bool, float]:
    stats = [s for s in _gather_stats(patients, desc.modality, workers, check=False) if s.ok]
    return crop_decision([s.reduction for s in stats])


def select_target_spacing(spacings) -> tuple:
    """Componentwise median; if anisotropic (max/min > 3) the coarsest axis takes its 10th percentile."""
    arr = np.asarray(spacings, dtype=np.float64).reshape(-1, 3)
    if arr.shape[0] == 0:
        raise ValueError("no spacings given")
    target = np.median(arr, axis=0)
    if target.max() / target.min() > ANISOTROPY_RATIO:
        for axis in np.flatnonzero(target == target.max()):
            target[axis] = np.percentile(arr[:, axis], ANISOTROPIC_SPACING_PERCENTILE)
    return tuple(float(t) for t in target)


def resampled_shape(shape, spacing, target_spacing) -> tuple:
    ratio = np.asarray(spacing, float) / np.asarray(target_spacing, float)
    return tuple(int(max(1, s)) for s in round_half_away(np.asarray(shape, float) * ratio))


def estimate_memory(median_resampled_shape, channels: int) -> tuple[int, bool]:
    """Bytes of one resampled example in 32-bit reals and whether it exceeds 2 GiB."""
    nbytes = int(np.prod([int(s) for s in median_resampled_shape])) * int(channels) * BYTES_PER_VOXEL
    return nbytes, nbytes > MEMORY_LIMIT_BYTES


def _floor_pow2(n: int) -> int:
    return 1 << (int(n).bit_length() - 1)


def select_patch_size(median_resampled_shape, max_patch=DEFAULT_MAX_PATCH_SIZE) -> tuple:
    """Largest power of two <= each dimension, capped per axis."""
    out = []
    for dim, cap in zip(median_resampled_shape, max_patch):
        if int(dim) < 1 or int(cap) < 1:
            raise ValueError("shape and cap must be >= 1")
        out.append(min(_floor_pow2(int(dim)), _floor_pow2(int(cap))))
    return tuple(out)


@dataclass
class NormalizationParams:
    use_nonzero_mask: bool
    mean_nonzero_ratio: float
    window_lo: Optional[float] = None
    window_hi: Optional[float] = None
    global_mean: Optional[float] = None
    global_std: Optional[float] = None


def normalization_from_stats(stats: Sequence[PatientStats], modality: str) -> NormalizationParams:
    ratios = [r for s in stats for r in s.nonzero_ratios]
    mean_ratio = float(np.mean(ratios)) if ratios else float("inf")
    if modality != "ct":
        return NormalizationParams(mean_ratio < NONZERO_RATIO_THRESHOLD, mean_ratio)
    pooled = [s.foreground_values for s in stats if s.foreground_values is not None]
    pooled = np.concatenate(pooled) if pooled else np.empty(0)
    if pooled.size == 0:
        raise NoForegroundVoxels("no labelled voxels in any CT mask")
    lo, hi = np.percentile(pooled, NORM_PERCENTILES)
    std = float(np.std(pooled))
    if not hi > lo:
        log.warning("degenerate CT window [%g, %g], widening by 1", lo, hi)
        hi = lo + 1.0
    if not std > 0:
        log.warning("zero CT foreground std, using 1.0")
        std = 1.0
    return NormalizationParams(
        use_nonzero_mask=False,
        mean_nonzero_ratio=mean_ratio,
        window_lo=float(lo),
        window_hi=float(hi),
        global_mean=float(np.mean(pooled)),
        global_std=std,
    )


def compute_normalization_params(patients, desc: DatasetDescription, workers: int = 1) -> NormalizationParams:
    stats = [s for s in _gather_stats(patients, desc.modality, workers, check=False) if s.ok]
    return normalization_from_stats(stats, desc.modality)


def analyze(
    desc: DatasetDescription,
    workers: int = 1,
    max_patch_size=DEFAULT_MAX_PATCH_SIZE,
    patients: Optional[Sequence[PatientRecord]] = None,
) -> PipelineConfig:
    if patients is None:
        patients = discover_patients(desc, "train")
    stats = _gather_stats(patients, desc.modality, workers, check=True)
    usable = [s for s in stats if s.ok]
    excluded = [s.id for s in stats if not s.ok]
    if not usable:
        raise NoUsablePatients("every patient failed the header checks")

    crop, mean_reduction = crop_decision([s.reduction for s in usable])
    target = select_target_spacing([s.spacing for s in usable])
    shapes = [
        resampled_shape(s.bbox_shape if crop else s.shape, s.spacing, target) for s in usable
    ]
    median_shape = tuple(int(max(1, v)) for v in round_half_away(np.median(np.asarray(shapes), axis=0)))
    nbytes, too_big = estimate_memory(median_shape, len(desc.channels))
    if too_big:
        log.warning(
            "resampled examples need about %.2f GiB; consider a coarser target spacing",
            nbytes / 2**30,
        )
    norm = normalization_from_stats(usable, desc.modality)

    return PipelineConfig(
        crop_to_foreground=bool(crop),
        mean_volume_reduction=mean_reduction,
        target_spacing=target,
        patch_size=select_patch_size(median_shape, max_patch_size),
        max_patch_size=tuple(max_patch_size),
        median_resampled_shape=median_shape,
        modality=desc.modality,
        labels=desc.labels,
        final_classes=desc.final_classes,
        channels=tuple(desc.channels),
        window_lo=norm.window_lo,
        window_hi=norm.window_hi,
        global_mean=norm.global_mean,
        global_std=norm.global_std,
        use_nonzero_mask=bool(norm.use_nonzero_mask),
        patient_ids=tuple(s.id for s in usable),
        excluded_ids=tuple(excluded),
        memory_warning=bool(too_big),
    )
