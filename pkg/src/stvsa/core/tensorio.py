"""Binary tensor container.

Layout (little-endian)::

    b"STVS" | version u8 (=1) | dtype u8 (0=float32, 1=int64) | rank u8 | rank x u64 dims | payload

The payload is the row-major array body; its length must match the dims exactly.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"STVS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1}
MAX_PAYLOAD_BYTES = 1 << 40


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""


class MagicMismatchError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class DimensionOverflowError(TensorFormatError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise UnsupportedDtypeError(f"cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DimensionOverflowError("rank exceeds 255")
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise TruncatedPayloadError("header shorter than 7 bytes")
    if buf[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    off = 7 + 8 * rank
    if len(buf) < off:
        raise TruncatedPayloadError("dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, 7)
    dtype = _DTYPES[code]
    count = 1
    for d in dims:
        count *= d
        if count * dtype.itemsize > MAX_PAYLOAD_BYTES:
            raise DimensionOverflowError(f"dims {dims} exceed the payload limit")
    nbytes = count * dtype.itemsize
    if len(buf) - off < nbytes:
        raise TruncatedPayloadError(f"payload has {len(buf) - off} bytes, expected {nbytes}")
    if len(buf) - off > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims).copy()


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
