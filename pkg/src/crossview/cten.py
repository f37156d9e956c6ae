"""CTEN binary tensor files.

Layout: magic ``CTEN``, u8 version (1), u8 dtype (0=f32, 1=f64), u8 rank,
little-endian u32 dims[rank], then the raw little-endian payload, row-major.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError

MAGIC = b"CTEN"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(path, arr: np.ndarray) -> None:
    raw = np.asarray(arr)
    arr = np.ascontiguousarray(raw).reshape(raw.shape)
    if arr.dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported dtype {arr.dtype} for {path}")
    if arr.ndim > 255:
        raise DataError(f"rank {arr.ndim} exceeds format limit")
    for d in arr.shape:
        if d > 0xFFFFFFFF:
            raise DataError(f"dimension {d} exceeds u32 range")
    header = MAGIC + bytes([VERSION, _DTYPE_CODES[arr.dtype], arr.ndim])
    dims = np.asarray(arr.shape, dtype="<u4").tobytes()
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + dims + payload)


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read tensor file {path}: {e}") from e
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise DataError(f"{path}: not a CTEN file")
    version, dtype_code, rank = blob[4], blob[5], blob[6]
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise DataError(f"{path}: unknown dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    dim_end = 7 + 4 * rank
    if len(blob) < dim_end:
        raise DataError(f"{path}: truncated dimension table")
    shape = tuple(int(d) for d in np.frombuffer(blob[7:dim_end], dtype="<u4"))
    count = 1
    for d in shape:
        count *= d
    expected = dim_end + count * dtype.itemsize
    if len(blob) != expected:
        raise DataError(f"{path}: payload size {len(blob) - dim_end} does not match shape {shape}")
    arr = np.frombuffer(blob[dim_end:], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)
