"""Versioned binary container for preprocessed arrays.

Layout (all little-endian)::

    offset  size  field
    0       4     magic b"MSTN"
    4       2     version (uint16) = 1
    6       1     dtype code (1 uint8, 2 int16, 3 int32, 4 float32, 5 float64, 6 uint16)
    7       1     kind (0 continuous, 1 labels)
    8       4     channels (uint32)
    12      12    shape x, y, z (3 x uint32)
    24      24    spacing mm (3 x float64)
    48      24    origin mm (3 x float64)
    72      72    direction, row-major (9 x float64)
    144     ...   voxel data, C order over (channel, x, y, z)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .volume import CONTINUOUS, LABELS, Volume

MAGIC = b"MSTN"
VERSION = 1
_HEADER = struct.Struct("<4sHBBI3I3d3d9d")
HEADER_SIZE = _HEADER.size

_DTYPES = {
    1: np.dtype("<u1"),
    2: np.dtype("<i2"),
    3: np.dtype("<i4"),
    4: np.dtype("<f4"),
    5: np.dtype("<f8"),
    6: np.dtype("<u2"),
}
_CODES = {dt.newbyteorder("="): code for code, dt in _DTYPES.items()}
_KINDS = {CONTINUOUS: 0, LABELS: 1}


class TensorFormatError(ValueError):
    pass


def encode_tensor(volume: Volume) -> bytes:
    dtype = volume.data.dtype.newbyteorder("=")
    if dtype not in _CODES:
        raise TensorFormatError(f"unsupported dtype {volume.data.dtype}")
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        _CODES[dtype],
        _KINDS[volume.kind],
        volume.channels,
        *volume.shape,
        *volume.spacing,
        *volume.origin,
        *np.asarray(volume.direction, dtype=np.float64).ravel(),
    )
    body = np.ascontiguousarray(volume.data, dtype=_DTYPES[_CODES[dtype]]).tobytes()
    return header + body


def decode_tensor(blob: bytes) -> Volume:
    if len(blob) < HEADER_SIZE:
        raise TensorFormatError("truncated header")
    fields = _HEADER.unpack_from(blob)
    magic, version, code, kind, channels = fields[:5]
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    shape = fields[5:8]
    spacing, origin = fields[8:11], fields[11:14]
    direction = np.array(fields[14:23]).reshape(3, 3)
    dtype = _DTYPES[code]
    count = channels * int(np.prod(shape))
    if len(blob) != HEADER_SIZE + count * dtype.itemsize:
        raise TensorFormatError("payload size does not match header")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=HEADER_SIZE)
    data = data.reshape(channels, *shape).astype(dtype.newbyteorder("="))
    return Volume(
        data=data,
        spacing=spacing,
        origin=origin,
        direction=direction,
        kind=LABELS if kind == 1 else CONTINUOUS,
    )


def save_tensor(volume: Volume, path) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(encode_tensor(volume))
    os.replace(tmp, path)


def load_tensor(path) -> Volume:
    return decode_tensor(Path(path).read_bytes())
