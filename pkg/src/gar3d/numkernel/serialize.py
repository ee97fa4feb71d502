"""GTEN binary tensor format.

Layout (little-endian): ``b"GTEN"``, u32 version, u32 rank, rank x u64
extents, u32 dtype tag, then the raw row-major payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

GTEN_MAGIC = b"GTEN"
GTEN_VERSION = 1

_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i8"): 4,
    np.dtype("bool"): 5,
}
_DTYPES = {v: k for k, v in _TAGS.items()}


def tensor_to_bytes(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _TAGS:
        raise FormatError(f"unsupported dtype for GTEN: {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=dt)
    head = GTEN_MAGIC + struct.pack("<II", GTEN_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<I", _TAGS[dt])
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    try:
        if buf[offset:offset + 4] != GTEN_MAGIC:
            raise FormatError("bad GTEN magic")
        version, rank = struct.unpack_from("<II", buf, offset + 4)
        if version != GTEN_VERSION:
            raise FormatError(f"unsupported GTEN version {version}")
        pos = offset + 12
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        (tag,) = struct.unpack_from("<I", buf, pos)
        pos += 4
    except struct.error as exc:
        raise FormatError(f"truncated GTEN header: {exc}") from None
    if tag not in _DTYPES:
        raise FormatError(f"unknown GTEN dtype tag {tag}")
    dt = _DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if pos + nbytes > len(buf):
        raise FormatError("truncated GTEN payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
    return arr, pos + nbytes


def save_gten(path, x) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_gten(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"trailing bytes after GTEN tensor in {path}")
    return arr
