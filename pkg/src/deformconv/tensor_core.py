"""Rank-4 float64 tensors in (n, c, h, w) layout and the DTEN binary format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and ndim 4,
C-contiguous, so element ``(n, c, y, x)`` lives at flat index
``((n*C + c)*H + y)*W + x``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTEN"
VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1

# magic, version, dtype, reserved(2), ndim, 4 dims
_HEADER = struct.Struct("<4sBBHI4I")
HEADER_SIZE = _HEADER.size

_MAX_ELEMENTS = np.iinfo(np.intp).max // 8


class TensorFormatError(ValueError):
    """Raised when DTEN bytes cannot be decoded."""


def _check_dims(dims) -> tuple[int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ValueError(f"expected 4 dims, got {len(dims)}")
    if any(d < 0 for d in dims):
        raise ValueError(f"dims must be non-negative: {dims}")
    size = 1
    for d in dims:
        size *= d
    if size > _MAX_ELEMENTS:
        raise OverflowError(f"flat length {size} overflows")
    return dims


def as_tensor4(a) -> np.ndarray:
    """Return ``a`` as a C-contiguous float64 array of rank 4."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 array, got shape {arr.shape}")
    return arr


def zeros(dims) -> np.ndarray:
    return np.zeros(_check_dims(dims), dtype=np.float64)


def fill_random(dims, seed: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Uniform values in ``[lo, hi)``, deterministic for a fixed seed."""
    if lo > hi:
        raise ValueError(f"lo ({lo}) must not exceed hi ({hi})")
    dims = _check_dims(dims)
    if lo == hi:
        return np.full(dims, float(lo), dtype=np.float64)
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=dims)


def write_tensor(t, dtype: int = DTYPE_F64) -> bytes:
    arr = as_tensor4(t)
    if dtype == DTYPE_F64:
        payload = arr.astype("<f8").tobytes()
    elif dtype == DTYPE_F32:
        payload = arr.astype("<f4").tobytes()
    else:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    header = _HEADER.pack(MAGIC, VERSION, dtype, 0, 4, *arr.shape)
    return header + payload


def read_tensor(data: bytes) -> np.ndarray:
    if len(data) < HEADER_SIZE:
        raise TensorFormatError(f"header truncated: {len(data)} bytes")
    magic, version, dtype, _reserved, ndim, *dims = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if ndim != 4:
        raise TensorFormatError(f"unsupported ndim {ndim}")
    if dtype == DTYPE_F64:
        itemsize, fmt = 8, "<f8"
    elif dtype == DTYPE_F32:
        itemsize, fmt = 4, "<f4"
    else:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    dims = _check_dims(dims)
    count = dims[0] * dims[1] * dims[2] * dims[3]
    payload = data[HEADER_SIZE:]
    if len(payload) != count * itemsize:
        raise TensorFormatError(
            f"length mismatch: dims {dims} need {count * itemsize} payload bytes, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=fmt).astype(np.float64)
    return arr.reshape(dims)


def save_tensor(path, t, dtype: int = DTYPE_F64) -> None:
    Path(path).write_bytes(write_tensor(t, dtype))


def load_tensor(path) -> np.ndarray:
    return read_tensor(Path(path).read_bytes())
