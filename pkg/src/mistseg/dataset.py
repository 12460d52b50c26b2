"""Dataset description JSON, patient discovery, MSD/CSV conversion and CV folds.

Expected layout (one sub-directory per patient)::

    train/
      Patient-001/
        Patient-001-t1n.nii.gz
        Patient-001-t2w.nii.gz
        Patient-001-seg.nii.gz

Dataset description keys::

    {
      "task": "brats",
      "modality": "mr",                 # ct | mr | other
      "train-data": "train",            # relative to the JSON file
      "test-data": "test",              # optional
      "mask": ["seg"],
      "images": {"t1": ["t1n"], "t2": ["t2w"]},
      "labels": [0, 1, 2, 3, 4],
      "final_classes": {"WT": [1, 2, 3], "TC": [1, 3]}
    }
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    AmbiguousMatch,
    BadCustomFolds,
    ConversionError,
    MissingChannel,
    MissingMask,
    SchemaError,
)
from .nifti import read_nifti, write_nifti
from .volume import LABELS

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODALITIES = ("ct", "mr", "other")
NIFTI_SUFFIXES = (".nii.gz", ".nii")
_KNOWN_KEYS = {
    "version", "task", "modality", "train-data", "test-data",
    "mask", "images", "labels", "final_classes",
}  # fmt: skip


@dataclass(frozen=True)
class DatasetDescription:
    task_name: str
    modality: str
    train_dir: Optional[Path]
    test_dir: Optional[Path]
    mask_patterns: tuple
    image_patterns: dict
    labels: tuple
    final_classes: dict

    @property
    def channels(self) -> list[str]:
        return list(self.image_patterns)

    def to_json(self, base_dir: Optional[Path] = None) -> dict:
        def rel(p):
            if p is None:
                return None
            if base_dir is not None:
                try:
                    return os.path.relpath(p, base_dir)
                except ValueError:
                    pass
            return str(p)

        out = {
            "version": SCHEMA_VERSION,
            "task": self.task_name,
            "modality": self.modality,
            "train-data": rel(self.train_dir),
            "mask": list(self.mask_patterns),
            "images": {k: list(v) for k, v in self.image_patterns.items()},
            "labels": list(self.labels),
            "final_classes": {k: sorted(v) for k, v in self.final_classes.items()},
        }
        if self.test_dir is not None:
            out["test-data"] = rel(self.test_dir)
        if out["train-data"] is None:
            del out["train-data"]
        return out


def _string_list(obj, field_name: str) -> tuple:
    if isinstance(obj, str):
        obj = [obj]
    if not isinstance(obj, list) or not obj or not all(isinstance(s, str) and s for s in obj):
        raise SchemaError(field_name, "expected a nonempty list of nonempty strings")
    return tuple(obj)


def _int_label(value, field_name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise SchemaError(field_name, f"labels must be nonnegative integers, got {value!r}")
    return value


def parse_description(json_text: str, base_dir=None) -> DatasetDescription:
    """Validate a dataset description; relative data paths resolve against ``base_dir``."""
    try:
        raw = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise SchemaError("<root>", f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("<root>", "expected a JSON object")
    for key in raw:
        if key not in _KNOWN_KEYS:
            raise SchemaError(key, "unknown key")
    for key in ("task", "modality", "images", "labels", "final_classes", "mask"):
        if key not in raw:
            raise SchemaError(key, "required key missing")

    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError("version", f"unsupported schema version {version!r}")
    task = raw["task"]
    if not isinstance(task, str) or not task:
        raise SchemaError("task", "expected a nonempty string")
    modality = raw["modality"]
    if not isinstance(modality, str) or modality.lower() not in MODALITIES:
        raise SchemaError("modality", f"expected one of {MODALITIES}")

    images = raw["images"]
    if not isinstance(images, dict) or not images:
        raise SchemaError("images", "expected a nonempty object of channel -> patterns")
    image_patterns = {}
    for name, patterns in images.items():
        if not name:
            raise SchemaError("images", "channel names must be nonempty")
        image_patterns[name] = _string_list(patterns, f"images.{name}")

    labels = raw["labels"]
    if not isinstance(labels, list) or not labels:
        raise SchemaError("labels", "expected a nonempty list")
    labels = [_int_label(v, "labels") for v in labels]
    if len(set(labels)) != len(labels):
        raise SchemaError("labels", "duplicate labels")
    if 0 not in labels:
        raise SchemaError("labels", "must contain background label 0")
    labels = tuple(sorted(labels))

    classes = raw["final_classes"]
    if not isinstance(classes, dict) or not classes:
        raise SchemaError("final_classes", "expected a nonempty object")
    final_classes = {}
    for name, members in classes.items():
        where = f"final_classes.{name}"
        if not name:
            raise SchemaError("final_classes", "class names must be nonempty")
        if isinstance(members, int) and not isinstance(members, bool):
            members = [members]
        if not isinstance(members, list) or not members:
            raise SchemaError(where, "expected a nonempty list of labels")
        members = {_int_label(v, where) for v in members}
        unknown = members - set(labels)
        if unknown:
            raise SchemaError(where, f"labels {sorted(unknown)} are not declared in 'labels'")
        final_classes[name] = frozenset(members)

    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def resolve(key):
        value = raw.get(key)
        if value is None:
            return None
        if not isinstance(value, str) or not value:
            raise SchemaError(key, "expected a path string")
        p = Path(value)
        return p if p.is_absolute() else (base / p)

    return DatasetDescription(
        task_name=task,
        modality=modality.lower(),
        train_dir=resolve("train-data"),
        test_dir=resolve("test-data"),
        mask_patterns=_string_list(raw["mask"], "mask"),
        image_patterns=image_patterns,
        labels=labels,
        final_classes=final_classes,
    )


def load_description(path) -> DatasetDescription:
    path = Path(path)
    return parse_description(path.read_text(), base_dir=path.parent)


@dataclass(frozen=True)
class PatientRecord:
    id: str
    image_paths: tuple
    mask_path: Optional[Path] = None

    def __post_init__(self):
        object.__setattr__(self, "image_paths", tuple(Path(p) for p in self.image_paths))
        if self.mask_path is not None:
            object.__setattr__(self, "mask_path", Path(self.mask_path))
        for p in (*self.image_paths, *([self.mask_path] if self.mask_path else [])):
            if not p.exists():
                raise FileNotFoundError(f"patient {self.id}: {p} does not exist")


def _is_nifti(name: str) -> bool:
    return name.endswith(NIFTI_SUFFIXES)


def discover_patients(desc: DatasetDescription, split: str = "train") -> list[PatientRecord]:
    """One record per patient sub-directory, sorted by id."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = desc.train_dir if split == "train" else desc.test_dir
    if root is None or not Path(root).is_dir():
        raise FileNotFoundError(f"{split} directory {root} does not exist")

    records = []
    for patient_dir in sorted((p for p in Path(root).iterdir() if p.is_dir()), key=lambda p: p.name):
        pid = patient_dir.name
        files = sorted(f.name for f in patient_dir.iterdir() if f.is_file() and _is_nifti(f.name))
        mask_files = [f for f in files if any(s in f for s in desc.mask_patterns)]
        candidates = [f for f in files if f not in mask_files]
        images = []
        for channel, patterns in desc.image_patterns.items():
            hits = [f for f in candidates if any(s in f for s in patterns)]
            if not hits:
                raise MissingChannel(pid, channel)
            if len(hits) > 1:
                raise AmbiguousMatch(pid, channel, hits)
            images.append(patient_dir / hits[0])
        if len(mask_files) > 1:
            raise AmbiguousMatch(pid, "mask", mask_files)
        mask = patient_dir / mask_files[0] if mask_files else None
        if split == "train" and mask is None:
            raise MissingMask(pid)
        records.append(PatientRecord(pid, tuple(images), mask))
    return records


# conversion


def _nifti_suffix(path: Path) -> str:
    return ".nii.gz" if path.name.endswith(".nii.gz") else ".nii"


def _strip_nifti(name: str) -> str:
    for s in NIFTI_SUFFIXES:
        if name.endswith(s):
            return name[: -len(s)]
    return name


def link_or_copy(src: Path, dst: Path) -> None:
    if dst.exists() or dst.is_symlink():
        dst.unlink()
    try:
        os.link(src, dst)
    except OSError:
        shutil.copy2(src, dst)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "", name) or "ch"


def _write_description(desc: DatasetDescription, out_root: Path) -> DatasetDescription:
    path = out_root / "dataset.json"
    path.write_text(json.dumps(desc.to_json(base_dir=out_root), indent=2) + "\n")
    return load_description(path)


def convert_msd(msd_root, out_root) -> DatasetDescription:
    """Convert a Medical Segmentation Decathlon task into the patient-directory layout."""
    msd_root, out_root = Path(msd_root), Path(out_root)
    meta_path = msd_root / "dataset.json"
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise ConversionError(f"cannot read {meta_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError("dataset.json", f"invalid JSON: {exc}") from exc
    for key in ("modality", "labels", "training"):
        if key not in meta:
            raise SchemaError(key, "missing from MSD dataset.json")

    modalities = [meta["modality"][k] for k in sorted(meta["modality"], key=int)]
    channel_names = []
    for m in modalities:
        name = _safe_name(m).lower()
        while name in channel_names:
            name += "x"
        channel_names.append(name)
    labels = sorted(int(k) for k in meta["labels"])
    label_names = {int(k): v for k, v in meta["labels"].items()}
    modality = "ct" if [m.upper() for m in modalities] == ["CT"] else "mr"

    def emit(image_path: Path, mask_path: Optional[Path], dest: Path, case_id: str):
        dest.mkdir(parents=True, exist_ok=True)
        if not image_path.exists():
            raise ConversionError(f"case {case_id}: missing image {image_path}")
        if len(channel_names) == 1:
            link_or_copy(image_path, dest / f"{case_id}_{channel_names[0]}{_nifti_suffix(image_path)}")
        else:
            vol = read_nifti(image_path)
            if vol.channels != len(channel_names):
                raise ConversionError(
                    f"case {case_id}: {vol.channels} channels, expected {len(channel_names)}"
                )
            for c, name in enumerate(channel_names):
                write_nifti(vol.replace(data=vol.data[c : c + 1]), dest / f"{case_id}_{name}.nii.gz")
        if mask_path is not None:
            if not mask_path.exists():
                raise ConversionError(f"case {case_id}: missing mask {mask_path}")
            link_or_copy(mask_path, dest / f"{case_id}_seg{_nifti_suffix(mask_path)}")

    for entry in meta["training"]:
        image = msd_root / entry["image"]
        case_id = _strip_nifti(image.name)
        emit(image, msd_root / entry["label"], out_root / "train" / case_id, case_id)
    test_entries = meta.get("test") or []
    for entry in test_entries:
        image = msd_root / (entry if isinstance(entry, str) else entry["image"])
        case_id = _strip_nifti(image.name)
        emit(image, None, out_root / "test" / case_id, case_id)

    desc = DatasetDescription(
        task_name=str(meta.get("name", msd_root.name)),
        modality=modality,
        train_dir=out_root / "train",
        test_dir=(out_root / "test") if test_entries else None,
        mask_patterns=("_seg.nii",),
        image_patterns={name: (f"_{name}.nii",) for name in channel_names},
        labels=tuple(labels),
        final_classes={
            _safe_name(label_names[l]) if label_names[l] else f"label{l}": frozenset({l})
            for l in labels
            if l != 0
        },
    )
    return _write_description(desc, out_root)


def convert_csv(
    csv_path,
    out_root,
    modality: str = "mr",
    labels: Optional[Sequence[int]] = None,
    final_classes: Optional[Mapping[str, Sequence[int]]] = None,
    split: str = "train",
) -> DatasetDescription:
    """Convert a CSV listing (``id``, ``mask``, one column per channel) into patient directories.

    Without ``labels`` the label set is read from the masks.
    """
    csv_path, out_root = Path(csv_path), Path(out_root)
    try:
        with csv_path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise ConversionError(f"cannot read {csv_path}: {exc}") from exc
    if "id" not in header:
        raise SchemaError("id", "CSV header needs an 'id' column")
    has_mask = "mask" in header
    channels = [h for h in header if h not in ("id", "mask")]
    if not channels:
        raise SchemaError("images", "CSV needs at least one image column")
    if split == "train" and not has_mask:
        raise SchemaError("mask", "training CSV needs a 'mask' column")

    base = csv_path.parent
    found_labels = {0}
    split_root = out_root / split
    for lineno, row in enumerate(rows, start=2):
        pid = (row.get("id") or "").strip()
        if not pid:
            raise SchemaError("id", f"row {lineno} has an empty id")
        sources = {c: row.get(c, "") for c in channels}
        if has_mask:
            sources["mask"] = row.get("mask", "")
        resolved = {}
        for column, value in sources.items():
            p = Path(value.strip()) if value and value.strip() else None
            if p is not None and not p.is_absolute():
                p = base / p
            if p is None or not p.exists():
                raise ConversionError(f"row {lineno} (id {pid}): file for '{column}' not found: {value!r}")
            resolved[column] = p
        dest = split_root / pid
        dest.mkdir(parents=True, exist_ok=True)
        for c in channels:
            src = resolved[c]
            link_or_copy(src, dest / f"{pid}_{_safe_name(c).lower()}{_nifti_suffix(src)}")
        if has_mask:
            src = resolved["mask"]
            link_or_copy(src, dest / f"{pid}_seg{_nifti_suffix(src)}")
            if labels is None:
                found_labels.update(int(v) for v in np.unique(read_nifti(src, kind=LABELS).data))

    label_list = tuple(sorted(labels)) if labels is not None else tuple(sorted(found_labels))
    classes = (
        {k: frozenset(v) for k, v in final_classes.items()}
        if final_classes
        else {f"label{l}": frozenset({l}) for l in label_list if l != 0}
    )
    if not classes:
        raise SchemaError("final_classes", "no foreground labels found")
    desc = DatasetDescription(
        task_name=csv_path.stem,
        modality=modality,
        train_dir=split_root if split == "train" else None,
        test_dir=split_root if split == "test" else None,
        mask_patterns=("_seg.nii",),
        image_patterns={_safe_name(c).lower(): (f"_{_safe_name(c).lower()}.nii",) for c in channels},
        labels=label_list,
        final_classes=classes,
    )
    return _write_description(desc, out_root)


# cross-validation folds


@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    assignment: dict = field(default_factory=dict)

    def validation_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f != fold)

    def to_json(self) -> dict:
        return {
            "n_folds": self.n_folds,
            "folds": [self.validation_ids(f) for f in range(self.n_folds)],
        }


def make_folds(ids, n_folds: int = 5, seed: int = 42, custom=None) -> FoldAssignment:
    """Seeded (PCG64) shuffle of the sorted ids, dealt round-robin into folds.

    ``custom`` may be a mapping id -> fold or a list of per-fold id lists.
    """
    ids = sorted(set(ids))
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    if not ids:
        raise ValueError("no ids to split")

    if custom is not None:
        if isinstance(custom, Mapping):
            assignment = {str(k): int(v) for k, v in custom.items()}
        else:
            assignment = {}
            for fold, members in enumerate(custom):
                for pid in members:
                    if pid in assignment:
                        raise BadCustomFolds(f"id {pid} appears in more than one fold")
                    assignment[pid] = fold
        missing = set(ids) - set(assignment)
        extra = set(assignment) - set(ids)
        if missing or extra:
            raise BadCustomFolds(f"missing ids {sorted(missing)}, unknown ids {sorted(extra)}")
        bad = {k: v for k, v in assignment.items() if not 0 <= v < n_folds}
        if bad:
            raise BadCustomFolds(f"fold index out of range for {sorted(bad)}")
        return FoldAssignment(n_folds, dict(sorted(assignment.items())))

    order = np.random.default_rng(seed).permutation(len(ids))
    assignment = {ids[j]: i % n_folds for i, j in enumerate(order)}
    return FoldAssignment(n_folds, dict(sorted(assignment.items())))
