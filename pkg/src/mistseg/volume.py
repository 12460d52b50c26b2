"""Volumes with physical geometry, orientation codes, bounding boxes, crop and pad.

Axis letters name the anatomical direction an index axis increases towards.
World axes are read as (R, A, I): a direction column dominated by +x is
``R``, by -x is ``L``; +y is ``A``, -y is ``P``; +z is ``I``, -z is ``S``.
Under this convention the identity direction matrix is ``RAI``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BoxOutOfRange, DegenerateDirection

log = logging.getLogger(__name__)

CONTINUOUS = "continuous"
LABELS = "labels"

_POS_LETTERS = "RAI"
_NEG_LETTERS = "LPS"


@dataclass(frozen=True, eq=False)
class Volume:
    """A channel-major 3D grid plus geometry.

    ``data`` always has shape ``(channels, x, y, z)``; 3D input gets a leading
    channel axis. The array is stored read-only.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    kind: str = CONTINUOUS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[np.newaxis]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (C, X, Y, Z), got {data.shape}")
        data = data.view()
        data.flags.writeable = False
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.array(self.direction, dtype=np.float64).reshape(3, 3)
        direction.flags.writeable = False
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin need three components")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if abs(abs(np.linalg.det(direction)) - 1.0) > 1e-6:
            raise ValueError("direction matrix must have |det| == 1")
        if self.kind not in (CONTINUOUS, LABELS):
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == LABELS:
            if data.dtype.kind == "f":
                if not np.all(np.mod(data, 1) == 0):
                    raise ValueError("label volumes must hold integer values")
            if data.size and data.min() < 0:
                raise ValueError("label volumes must be nonnegative")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def shape(self) -> tuple:
        return tuple(int(n) for n in self.data.shape[1:])

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def array(self) -> np.ndarray:
        """The 3D array of a single-channel volume."""
        if self.channels != 1:
            raise ValueError(f"volume has {self.channels} channels")
        return self.data[0]

    @property
    def affine(self) -> np.ndarray:
        aff = np.eye(4)
        aff[:3, :3] = self.direction * np.asarray(self.spacing)[np.newaxis, :]
        aff[:3, 3] = self.origin
        return aff

    def replace(self, **changes) -> "Volume":
        values = dict(
            data=self.data,
            spacing=self.spacing,
            origin=self.origin,
            direction=self.direction,
            kind=self.kind,
        )
        values.update(changes)
        return Volume(**values)

    def physical_point(self, index) -> np.ndarray:
        """World coordinate (mm) of a voxel index (or an (N, 3) array of them)."""
        idx = np.asarray(index, dtype=np.float64)
        return idx * np.asarray(self.spacing) @ self.direction.T + np.asarray(self.origin)

    def same_geometry(self, other: "Volume", tol: float = 1e-3) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
            and np.allclose(self.direction, other.direction, rtol=0, atol=tol)
        )


def diagonal_mm(shape: Sequence[int], spacing: Sequence[float]) -> float:
    """Physical length of the grid diagonal."""
    return float(np.sqrt(np.sum((np.asarray(shape, float) * np.asarray(spacing, float)) ** 2)))


# orientation


def _check_orthonormal(direction: np.ndarray) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).reshape(3, 3)
    if not np.allclose(d.T @ d, np.eye(3), rtol=0, atol=1e-6):
        raise DegenerateDirection("direction matrix is not orthonormal")
    return d


def _axis_codes(direction) -> list[tuple[int, int]]:
    d = _check_orthonormal(direction)
    codes = []
    for col in d.T:
        # np.argmax returns the first maximum, so ties resolve in x, y, z order
        world = int(np.argmax(np.abs(col)))
        codes.append((world, 1 if col[world] > 0 else -1))
    if len({w for w, _ in codes}) != 3:
        raise DegenerateDirection(f"two axes map to the same anatomical axis: {d.tolist()}")
    return codes


def orientation_of(direction) -> str:
    """Three-letter orientation code of a direction matrix (columns = index axes)."""
    return "".join(
        (_POS_LETTERS if sign > 0 else _NEG_LETTERS)[world]
        for world, sign in _axis_codes(direction)
    )


def _parse_code(code: str) -> list[tuple[int, int]]:
    code = code.upper()
    if len(code) != 3:
        raise DegenerateDirection(f"orientation code must have 3 letters: {code!r}")
    parsed = []
    for letter in code:
        if letter in _POS_LETTERS:
            parsed.append((_POS_LETTERS.index(letter), 1))
        elif letter in _NEG_LETTERS:
            parsed.append((_NEG_LETTERS.index(letter), -1))
        else:
            raise DegenerateDirection(f"unknown orientation letter {letter!r}")
    if len({w for w, _ in parsed}) != 3:
        raise DegenerateDirection(f"orientation code {code!r} repeats an axis")
    return parsed


def reorient(v: Volume, target: str = "RAI") -> Volume:
    """Permute and flip axes so that ``orientation_of(result.direction) == target``.

    Pure index permutation: voxel values and physical positions are preserved.
    """
    src = _axis_codes(v.direction)
    dst = _parse_code(target)
    perm, flips = [], []
    for world, sign in dst:
        a = next(i for i, (w, _) in enumerate(src) if w == world)
        perm.append(a)
        flips.append(src[a][1] != sign)
    if perm == [0, 1, 2] and not any(flips):
        return v

    data = np.transpose(v.data, (0, *(p + 1 for p in perm)))
    flip_axes = tuple(p + 1 for p, f in enumerate(flips) if f)
    if flip_axes:
        data = np.flip(data, axis=flip_axes)
    data = np.ascontiguousarray(data)

    direction = np.empty((3, 3))
    origin = np.asarray(v.origin, dtype=np.float64).copy()
    spacing = []
    for p, (a, f) in enumerate(zip(perm, flips)):
        col = v.direction[:, a]
        spacing.append(v.spacing[a])
        if f:
            origin += col * v.spacing[a] * (v.shape[a] - 1)
            col = -col
        direction[:, p] = col
    return v.replace(data=data, spacing=tuple(spacing), origin=tuple(origin), direction=direction)


# bounding boxes, crop, pad


@dataclass(frozen=True)
class BoundingBox:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(int(x) for x in self.lo)
        hi = tuple(int(x) for x in self.hi)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)) or min(lo) < 0:
            raise BoxOutOfRange(f"invalid box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def full(cls, shape) -> "BoundingBox":
        return cls((0, 0, 0), tuple(shape))

    @property
    def shape(self) -> tuple:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slices(self) -> tuple:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            tuple(min(a, b) for a, b in zip(self.lo, other.lo)),
            tuple(max(a, b) for a, b in zip(self.hi, other.hi)),
        )

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_json(cls, obj) -> "BoundingBox":
        return cls(tuple(obj["lo"]), tuple(obj["hi"]))


def tight_bbox(mask) -> BoundingBox:
    """Smallest box holding every nonzero voxel; the full box for an empty mask."""
    arr = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    if arr.ndim == 4:
        arr = np.any(arr != 0, axis=0)
    arr = arr != 0
    if not arr.any():
        log.warning("empty foreground mask, keeping the full volume")
        return BoundingBox.full(arr.shape)
    lo, hi = [], []
    for axis in range(3):
        others = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(arr.any(axis=others))
        lo.append(hits[0])
        hi.append(hits[-1] + 1)
    return BoundingBox(tuple(lo), tuple(hi))


def crop(v: Volume, box: BoundingBox) -> Volume:
    if any(h > n for h, n in zip(box.hi, v.shape)):
        raise BoxOutOfRange(f"box {box} exceeds shape {v.shape}")
    if box.lo == (0, 0, 0) and box.hi == v.shape:
        return v
    if box.size == 0:
        raise BoxOutOfRange(f"box {box} is empty")
    data = np.ascontiguousarray(v.data[(slice(None), *box.slices)])
    return v.replace(data=data, origin=tuple(v.physical_point(box.lo)))


def pad_widths(shape, min_shape) -> list[tuple[int, int]]:
    """Symmetric padding per axis; an odd extra voxel goes to the high side."""
    widths = []
    for n, m in zip(shape, min_shape):
        total = max(int(m) - int(n), 0)
        widths.append((total // 2, total - total // 2))
    return widths


def pad_to(v: Volume, min_shape, fill: float = 0.0) -> Volume:
    if any(int(m) < 1 for m in min_shape):
        raise ValueError(f"min_shape must be >= 1, got {min_shape}")
    widths = pad_widths(v.shape, min_shape)
    if not any(lo or hi for lo, hi in widths):
        return v
    data = np.pad(v.data, [(0, 0), *widths], mode="constant", constant_values=fill)
    lows = [lo for lo, _ in widths]
    origin = v.physical_point([-x for x in lows])
    return v.replace(data=data, origin=tuple(origin))
