"""Tensor blob files.

Layout: magic ``GCMO``, format version (u32 LE), dtype code (u8: 0 = float32,
1 = uint8, 2 = float64), ndim (u8), then ndim extents (u64 LE each), then the
raw row-major little-endian payload. Used for volumes, masks, model weights,
and whitening transforms.
"""

import struct
from pathlib import Path

import numpy as np

from gradcamo.errors import DataFormatError, IOFailure, ValidationError

MAGIC = b"GCMO"
VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_KIND_TO_CODE = {"f4": 0, "u1": 1, "f8": 2}

_HEADER = struct.Struct("<4sIBB")
_MAX_NDIM = 16


def _dtype_code(dtype):
    key = np.dtype(dtype).newbyteorder("<").str.lstrip("<|=")
    if key not in _KIND_TO_CODE:
        raise ValidationError(
            f"unsupported tensor dtype {np.dtype(dtype)}; "
            "use float32, uint8 or float64")
    return _KIND_TO_CODE[key]


def write_tensor(path, arr):
    """Serialize one array. Dtype must be float32, uint8 or float64."""
    arr = np.asarray(arr)
    code = _dtype_code(arr.dtype)
    if arr.ndim < 1 or arr.ndim > _MAX_NDIM:
        raise ValidationError(f"tensor rank must be 1..{_MAX_NDIM}, got {arr.ndim}")
    if arr.size == 0:
        raise ValidationError("refusing to write an empty tensor")
    path = Path(path)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code])
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(payload.tobytes(order="C"))
    except OSError as exc:
        raise IOFailure(f"cannot write tensor file {path}: {exc}") from exc


def read_tensor(path):
    """Load one array, validating the header and payload size."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read tensor file {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, code, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    if code not in _CODE_TO_DTYPE:
        raise DataFormatError(f"{path}: unknown dtype code {code}")
    if ndim < 1 or ndim > _MAX_NDIM:
        raise DataFormatError(f"{path}: implausible rank {ndim}")
    offset = _HEADER.size
    need = ndim * 8
    if len(blob) < offset + need:
        raise DataFormatError(f"{path}: truncated extent table")
    shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += need
    if any(s == 0 for s in shape):
        raise DataFormatError(f"{path}: zero extent in shape {shape}")
    dtype = _CODE_TO_DTYPE[code]
    count = 1
    for s in shape:
        count *= s
    expected = count * dtype.itemsize
    actual = len(blob) - offset
    if actual != expected:
        raise DataFormatError(
            f"{path}: payload is {actual} bytes, shape {shape} needs {expected}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).copy()
