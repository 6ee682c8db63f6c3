"""Binary volume files.

Layout (little-endian)::

    magic  b"SPVOL\\x00"          6 bytes
    version u16
    dtype   u8                    0 = float32, 1 = float64, 2 = uint8
    dims    3 x u32
    voxel   3 x f64               mm
    affine  16 x f64              voxel index -> world mm, row-major
    data    prod(dims) values     C order
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"SPVOL\x00"
VERSION = 1
_HEAD = struct.Struct("<6sHB3I3d16d")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2, np.dtype("bool"): 2}


@dataclass
class Volume:
    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValidationError("volume data must be 3D")
        vs = np.broadcast_to(np.asarray(self.voxel_size, dtype=np.float64), (3,))
        self.voxel_size = tuple(float(v) for v in vs)
        if self.affine is None:
            a = np.diag(list(self.voxel_size) + [1.0])
            a[:3, 3] = -(np.asarray(self.data.shape) - 1) / 2.0 * np.asarray(self.voxel_size)
            self.affine = a
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)


def encode(vol: Volume) -> bytes:
    try:
        code = _CODES[vol.data.dtype]
    except KeyError:
        raise ValidationError(f"unsupported volume dtype {vol.data.dtype}") from None
    head = _HEAD.pack(MAGIC, VERSION, code, *vol.data.shape, *vol.voxel_size, *vol.affine.ravel())
    return head + np.ascontiguousarray(vol.data, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes) -> Volume:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("not a volume file (bad magic)", offset=0)
    if len(buf) < _HEAD.size:
        raise FormatError("truncated volume header", offset=len(buf), missing=_HEAD.size - len(buf))
    fields = _HEAD.unpack_from(buf)
    _, version, code = fields[:3]
    if version != VERSION:
        raise FormatError(f"unsupported volume version {version}", offset=6)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=8)
    dims = fields[3:6]
    voxel = fields[6:9]
    affine = np.array(fields[9:25]).reshape(4, 4)
    dt = _DTYPES[code]
    need = _HEAD.size + int(np.prod(dims)) * dt.itemsize
    if len(buf) < need:
        raise FormatError("truncated volume data", offset=len(buf), missing=need - len(buf))
    data = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims)), offset=_HEAD.size).reshape(dims)
    return Volume(data.astype(dt.newbyteorder("=")), voxel, affine)


def write_volume(path, vol: Volume):
    with open(path, "wb") as fh:
        fh.write(encode(vol))


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        return decode(fh.read())
