"""Little-endian binary tensor records.

Layout: ``rank`` (u64), ``rank`` extents (u64 each), dtype code (u32),
then the row-major payload. Code 0 is float32, 1 float64, 2 int8.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .tensor import Tensor

DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("i1"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def tensor_to_bytes(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in DTYPE_CODES:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    head = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<I", DTYPE_CODES[dt])
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise ValueError("truncated tensor record")
    (rank,) = struct.unpack_from("<Q", buf, 0)
    off = 8
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    (code,) = struct.unpack_from("<I", buf, off)
    off += 4
    if code not in CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dt = CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - off != count * dt.itemsize:
        raise ValueError("tensor payload size does not match header")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).copy()


def save_tensor(path: str | os.PathLike, x) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
