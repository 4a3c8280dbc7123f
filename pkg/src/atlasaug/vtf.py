"""VTF: a tiny binary tensor container.

Layout: magic "VTF1"; dtype byte (0 = float32, 1 = int32); ndim byte; two
reserved zero bytes; ndim little-endian u32 extents; row-major
little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTF1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1}


class VtfError(Exception):
    pass


class BadMagicError(VtfError):
    pass


class UnknownDtypeError(VtfError):
    pass


class TruncatedPayloadError(VtfError):
    pass


def encode(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    if arr.dtype not in _CODES:
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int32)
        else:
            raise UnknownDtypeError(f"cannot encode dtype {arr.dtype}")
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite data")
    header = MAGIC + struct.pack("<BBxx", _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at offset; returns (tensor, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[offset:offset + 4]!r}")
    code, ndim = struct.unpack_from("<BBxx", buf, offset + 4)
    if code not in _DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    pos = offset + 8
    if len(buf) < pos + 4 * ndim:
        raise TruncatedPayloadError("header truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    nbytes = n * dt.itemsize
    if len(buf) < pos + nbytes:
        raise TruncatedPayloadError(
            f"payload needs {nbytes} bytes, {len(buf) - pos} available"
        )
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(shape)
    return arr.copy(), pos + nbytes


def write_vtf(path, tensor: np.ndarray) -> None:
    Path(path).write_bytes(encode(tensor))


def read_vtf(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise VtfError(f"{len(buf) - end} trailing bytes")
    return arr
