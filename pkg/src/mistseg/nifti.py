"""NIfTI-1 reader and writer (single-file ``.nii``/``.nii.gz`` and ``.hdr``/``.img`` pairs).

Only the fields needed for geometry and voxel data are interpreted; header
extensions are skipped on read and never written.
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CorruptHeader,
    DimensionUnsupported,
    LossyCast,
    NiftiIoError,
    UnsupportedDatatype,
)
from .volume import CONTINUOUS, LABELS, Volume

log = logging.getLogger(__name__)

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352
MAGIC_SINGLE = b"n+1\0"
MAGIC_PAIR = b"ni1\0"
GZIP_MAGIC = b"\x1f\x8b"

_HEADER_FORMAT = "i10s18sihcB8h3f4h8f3fhBB4f2i80s24s2h6f12f16s4s"

# datatype code -> (numpy dtype, bitpix)
DATATYPES = {
    2: (np.uint8, 8),
    4: (np.int16, 16),
    8: (np.int32, 32),
    16: (np.float32, 32),
    64: (np.float64, 64),
    512: (np.uint16, 16),
    768: (np.uint32, 32),
    1024: (np.int64, 64),
    1280: (np.uint64, 64),
}
_CODES = {np.dtype(dt): code for code, (dt, _) in DATATYPES.items()}


@dataclass
class NiftiHeader:
    sizeof_hdr: int = HEADER_SIZE
    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype_code: int = 16
    bitpix: int = 32
    pixdim: tuple = (1.0,) * 8
    vox_offset: float = float(SINGLE_FILE_OFFSET)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    xyzt_units: int = 2
    qform_code: int = 0
    sform_code: int = 0
    quatern_b: float = 0.0
    quatern_c: float = 0.0
    quatern_d: float = 0.0
    qoffset_x: float = 0.0
    qoffset_y: float = 0.0
    qoffset_z: float = 0.0
    srow_x: tuple = (1.0, 0.0, 0.0, 0.0)
    srow_y: tuple = (0.0, 1.0, 0.0, 0.0)
    srow_z: tuple = (0.0, 0.0, 1.0, 0.0)
    magic: bytes = MAGIC_SINGLE
    byte_order: str = "<"
    descrip: bytes = field(default=b"", repr=False)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(DATATYPES[self.datatype_code][0]).newbyteorder(self.byte_order)


def decode_header(buf: bytes) -> NiftiHeader:
    """Decode a 348-byte NIfTI-1 header, detecting byte order from ``sizeof_hdr``."""
    if len(buf) < HEADER_SIZE:
        raise CorruptHeader(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    buf = bytes(buf[:HEADER_SIZE])
    for order in ("<", ">"):
        if struct.unpack(order + "i", buf[:4])[0] == HEADER_SIZE:
            break
    else:
        raise CorruptHeader("sizeof_hdr is not 348 in either byte order")

    f = struct.unpack(order + _HEADER_FORMAT, buf)
    # indices follow _HEADER_FORMAT field order
    dim = f[7:15]
    datatype, bitpix = f[19], f[20]
    pixdim = f[22:30]
    magic = f[-1]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise BadMagic(f"unexpected magic {magic!r}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} is not supported")
    if DATATYPES[datatype][1] != bitpix:
        raise CorruptHeader(f"bitpix {bitpix} does not match datatype {datatype}")
    if not 1 <= dim[0] <= 7:
        raise CorruptHeader(f"dim[0]={dim[0]} outside 1..7")
    if any(d < 1 for d in dim[1 : dim[0] + 1]):
        raise CorruptHeader(f"nonpositive dimension in {dim}")

    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=tuple(dim),
        datatype_code=datatype,
        bitpix=bitpix,
        pixdim=tuple(pixdim),
        vox_offset=f[30],
        scl_slope=f[31],
        scl_inter=f[32],
        xyzt_units=f[35],
        descrip=f[42].rstrip(b"\0"),
        qform_code=f[44],
        sform_code=f[45],
        quatern_b=f[46],
        quatern_c=f[47],
        quatern_d=f[48],
        qoffset_x=f[49],
        qoffset_y=f[50],
        qoffset_z=f[51],
        srow_x=tuple(f[52:56]),
        srow_y=tuple(f[56:60]),
        srow_z=tuple(f[60:64]),
        magic=magic,
        byte_order=order,
    )


def encode_header(hdr: NiftiHeader) -> bytes:
    values = (
        HEADER_SIZE, b"", b"", 0, 0, b"r", 0,
        *hdr.dim,
        0.0, 0.0, 0.0,
        0, hdr.datatype_code, hdr.bitpix, 0,
        *hdr.pixdim,
        hdr.vox_offset, hdr.scl_slope, hdr.scl_inter,
        0, 0, hdr.xyzt_units,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        hdr.descrip[:80], b"",
        hdr.qform_code, hdr.sform_code,
        hdr.quatern_b, hdr.quatern_c, hdr.quatern_d,
        hdr.qoffset_x, hdr.qoffset_y, hdr.qoffset_z,
        *hdr.srow_x, *hdr.srow_y, *hdr.srow_z,
        b"", hdr.magic,
    )  # fmt: skip
    return struct.pack(hdr.byte_order + _HEADER_FORMAT, *values)


# quaternion <-> rotation


def quaternion_to_matrix(b: float, c: float, d: float) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )


def matrix_to_quaternion(rot: np.ndarray) -> tuple[float, float, float]:
    """(b, c, d) of a proper rotation, with the scalar part kept nonnegative."""
    r = np.asarray(rot, dtype=np.float64)
    trace = np.trace(r)
    if trace > 0:
        s = 2.0 * np.sqrt(1.0 + trace)
        a = 0.25 * s
        b = (r[2, 1] - r[1, 2]) / s
        c = (r[0, 2] - r[2, 0]) / s
        d = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a = (r[2, 1] - r[1, 2]) / s
        b = 0.25 * s
        c = (r[0, 1] + r[1, 0]) / s
        d = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a = (r[0, 2] - r[2, 0]) / s
        b = (r[0, 1] + r[1, 0]) / s
        c = 0.25 * s
        d = (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a = (r[1, 0] - r[0, 1]) / s
        b = (r[0, 2] + r[2, 0]) / s
        c = (r[1, 2] + r[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return float(b), float(c), float(d)


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def header_geometry(hdr: NiftiHeader) -> tuple[tuple, tuple, np.ndarray]:
    """(spacing, origin, direction) with sform taking precedence over qform."""
    spacing = []
    for s in hdr.pixdim[1:4]:
        s = abs(float(s))
        if not s > 0 or not np.isfinite(s):
            log.warning("invalid pixdim %r, using 1.0", s)
            s = 1.0
        spacing.append(s)

    if hdr.sform_code > 0:
        srow = np.array([hdr.srow_x, hdr.srow_y, hdr.srow_z], dtype=np.float64)
        m = srow[:, :3]
        norms = np.linalg.norm(m, axis=0)
        if np.any(norms == 0):
            raise CorruptHeader("sform has a zero column")
        direction = m / norms
        if not np.allclose(direction.T @ direction, np.eye(3), atol=1e-6):
            direction = _orthonormalize(direction)
        origin = srow[:, 3]
    elif hdr.qform_code > 0:
        direction = quaternion_to_matrix(
            float(hdr.quatern_b), float(hdr.quatern_c), float(hdr.quatern_d)
        )
        qfac = -1.0 if hdr.pixdim[0] < 0 else 1.0
        direction[:, 2] *= qfac
        origin = np.array([hdr.qoffset_x, hdr.qoffset_y, hdr.qoffset_z], dtype=np.float64)
    else:
        direction = np.eye(3)
        origin = np.zeros(3)
    return tuple(spacing), tuple(float(o) for o in origin), direction


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise NiftiIoError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiIoError(f"corrupt gzip stream in {path}: {exc}") from exc
    if path.suffix == ".gz":
        log.debug("%s has a .gz suffix but is not gzip-compressed", path)
    return raw


def _pair_image_path(path: Path) -> Path:
    name = path.name
    for hdr_suffix in (".hdr.gz", ".hdr"):
        if name.endswith(hdr_suffix):
            stem = name[: -len(hdr_suffix)]
            for img_suffix in (".img", ".img.gz"):
                candidate = path.with_name(stem + img_suffix)
                if candidate.exists():
                    return candidate
    raise NiftiIoError(f"no .img file found next to {path}")


def read_nifti(path, kind: str = CONTINUOUS) -> Volume:
    """Read a NIfTI-1 file into a :class:`Volume` (values scaled, NaNs zeroed)."""
    path = Path(path)
    raw = _read_bytes(path)
    hdr = decode_header(raw)

    ndim = hdr.dim[0]
    sizes = list(hdr.dim[1 : ndim + 1])
    while len(sizes) > 3 and sizes[-1] == 1:
        sizes.pop()
    if len(sizes) < 3:
        raise DimensionUnsupported(f"{path}: spatial rank {len(sizes)} is not 3")
    if len(sizes) > 4:
        raise DimensionUnsupported(f"{path}: dimensions {sizes} beyond 4D are not supported")
    channels = sizes[3] if len(sizes) == 4 else 1
    count = int(np.prod(sizes))

    if hdr.magic == MAGIC_PAIR:
        payload, offset = _read_bytes(_pair_image_path(path)), int(hdr.vox_offset)
    else:
        payload, offset = raw, int(hdr.vox_offset)
        if offset < HEADER_SIZE:
            raise CorruptHeader(f"vox_offset {offset} inside header")
    needed = offset + count * hdr.dtype.itemsize
    if len(payload) < needed:
        raise CorruptHeader(f"{path}: expected {needed} bytes of data, found {len(payload)}")

    flat = np.frombuffer(payload, dtype=hdr.dtype, count=count, offset=offset)
    arr = flat.reshape((*sizes[:3], channels), order="F")
    data = np.ascontiguousarray(np.moveaxis(arr, 3, 0)).astype(hdr.dtype.newbyteorder("="))

    slope, inter = float(hdr.scl_slope), float(hdr.scl_inter)
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and (inter == 0 or not np.isfinite(inter))):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)

    if data.dtype.kind == "f":
        nans = np.isnan(data)
        if nans.any():
            log.warning("%s: replacing %d NaN voxels with 0", path, int(nans.sum()))
            data = np.where(nans, 0, data).astype(data.dtype)

    spacing, origin, direction = header_geometry(hdr)
    return Volume(data=data, spacing=spacing, origin=origin, direction=direction, kind=kind)


def _label_dtype(max_label: int) -> np.dtype:
    for dt in (np.uint8, np.uint16, np.uint32):
        if max_label <= np.iinfo(dt).max:
            return np.dtype(dt)
    return np.dtype(np.uint64)


def build_header(volume: Volume, dtype: np.dtype, byte_order: str = "<") -> NiftiHeader:
    direction = np.asarray(volume.direction, dtype=np.float64)
    qfac = 1.0
    rot = direction.copy()
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot[:, 2] *= -1
    qb, qc, qd = matrix_to_quaternion(rot)
    aff = volume.affine
    ndim = 3 if volume.channels == 1 else 4
    dim = (ndim, *volume.shape, volume.channels, 1, 1, 1)
    code = _CODES[np.dtype(dtype)]
    return NiftiHeader(
        dim=dim,
        datatype_code=code,
        bitpix=DATATYPES[code][1],
        pixdim=(qfac, *volume.spacing, 1.0, 1.0, 1.0, 1.0),
        vox_offset=float(SINGLE_FILE_OFFSET),
        scl_slope=1.0,
        scl_inter=0.0,
        xyzt_units=2,
        qform_code=1,
        sform_code=1,
        quatern_b=qb,
        quatern_c=qc,
        quatern_d=qd,
        qoffset_x=aff[0, 3],
        qoffset_y=aff[1, 3],
        qoffset_z=aff[2, 3],
        srow_x=tuple(aff[0]),
        srow_y=tuple(aff[1]),
        srow_z=tuple(aff[2]),
        magic=MAGIC_SINGLE,
        byte_order=byte_order,
    )


def write_nifti(
    volume: Volume,
    path,
    dtype=None,
    *,
    allow_lossy: bool = False,
    byte_order: str = "<",
    compresslevel: int = 6,
) -> None:
    """Write ``volume`` as a single-file NIfTI-1; ``.gz`` suffix selects gzip.

    Label volumes default to the smallest unsigned type holding the max label
    (uint8 below 256); continuous volumes default to float32. Casting
    continuous data to an integer type needs ``allow_lossy=True``.
    """
    path = Path(path)
    data = volume.data
    if dtype is None:
        if volume.kind == LABELS:
            dtype = _label_dtype(int(data.max()) if data.size else 0)
        else:
            dtype = np.float64 if data.dtype == np.float64 else np.float32
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise UnsupportedDatatype(f"cannot write dtype {dtype}")
    if dtype.kind in "iu":
        if volume.kind == CONTINUOUS and data.dtype.kind == "f" and not allow_lossy:
            raise LossyCast(f"continuous data cannot be stored as {dtype} without allow_lossy")
        info = np.iinfo(dtype)
        if data.size and (data.min() < info.min or data.max() > info.max) and not allow_lossy:
            raise LossyCast(f"values outside the range of {dtype}")
        if data.dtype.kind == "f":
            data = np.rint(data)

    hdr = build_header(volume, dtype, byte_order)
    body = np.moveaxis(data, 0, 3).astype(dtype.newbyteorder(byte_order))
    blob = encode_header(hdr) + b"\0\0\0\0" + body.tobytes(order="F")
    if path.name.endswith(".gz"):
        blob = gzip.compress(blob, compresslevel=compresslevel, mtime=0)
    if not path.parent.is_dir():
        raise NiftiIoError(f"parent directory of {path} does not exist")
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise NiftiIoError(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class HeaderInfo:
    shape: tuple
    channels: int
    spacing: tuple
    origin: tuple
    direction: np.ndarray


def read_nifti_header(path) -> HeaderInfo:
    """Geometry of a NIfTI file without loading its voxel data."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            lead = fh.read(2)
            fh.seek(0)
            if lead == GZIP_MAGIC:
                with gzip.GzipFile(fileobj=fh) as gz:
                    buf = gz.read(HEADER_SIZE)
            else:
                buf = fh.read(HEADER_SIZE)
    except (OSError, EOFError) as exc:
        raise NiftiIoError(f"cannot read {path}: {exc}") from exc
    hdr = decode_header(buf)
    sizes = list(hdr.dim[1 : hdr.dim[0] + 1])
    while len(sizes) > 3 and sizes[-1] == 1:
        sizes.pop()
    if len(sizes) not in (3, 4):
        raise DimensionUnsupported(f"{path}: unsupported dimensions {sizes}")
    spacing, origin, direction = header_geometry(hdr)
    return HeaderInfo(
        shape=tuple(sizes[:3]),
        channels=sizes[3] if len(sizes) == 4 else 1,
        spacing=spacing,
        origin=origin,
        direction=direction,
    )
