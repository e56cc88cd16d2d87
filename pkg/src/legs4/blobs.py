"""Binary tensor container used for every array that crosses a process boundary.

Layout: magic ``4LEG`` | version u32 | dtype u8 | ndim u8 | dims u64*ndim |
payload, everything little-endian, payload row-major. dtype 0 is float32,
dtype 1 is uint8 (raw video / crop tubes).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"4LEG"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class BlobError(ValueError):
    """Raised for malformed or truncated tensor blobs."""


def encode_blob(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.float64 or arr.dtype == np.float16:
        arr = arr.astype(np.float32)
    if arr.dtype not in _DTYPE_CODES:
        raise BlobError(f"unsupported dtype {arr.dtype}; only float32 and uint8 blobs exist")
    code = _DTYPE_CODES[arr.dtype]
    arr = np.ascontiguousarray(arr)
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return header + dims + payload


def decode_blob(data: bytes) -> np.ndarray:
    if len(data) < 10:
        raise BlobError("blob shorter than fixed header")
    if data[:4] != MAGIC:
        raise BlobError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, code, ndim = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise BlobError(f"unsupported blob version {version}")
    if code not in _DTYPES:
        raise BlobError(f"unknown dtype code {code}")
    offset = 10
    if len(data) < offset + 8 * ndim:
        raise BlobError("blob truncated inside dims")
    shape = struct.unpack_from(f"<{ndim}Q", data, offset) if ndim else ()
    offset += 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(data) != expected:
        raise BlobError(f"payload size {len(data) - offset} does not match dims {shape}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).copy()


def write_blob(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_blob(array))


def read_blob(path: str | Path) -> np.ndarray:
    return decode_blob(Path(path).read_bytes())
