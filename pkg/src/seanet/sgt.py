"""SGT1 binary tensor files.

Layout: magic ``b"SGT1"``, u8 dtype code (0 = f32, 1 = f64), u8 ndim,
ndim little-endian u32 dims, then the row-major little-endian payload.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFileError(ValueError):
    pass


def encode(array):
    arr = np.asarray(array)
    code = _BY_DTYPE.get(arr.dtype)
    if code is None:
        raise TensorFileError(f"unsupported dtype {arr.dtype}; SGT1 stores f32 or f64")
    if arr.ndim > 255:
        raise TensorFileError("too many dimensions")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode(buf):
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFileError("not an SGT1 tensor (bad magic)")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise TensorFileError(f"unknown dtype code {code}")
    offset = 6 + 4 * ndim
    if len(buf) < offset:
        raise TensorFileError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 6)
    dtype = _CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != offset + count * dtype.itemsize:
        raise TensorFileError(f"payload size mismatch for shape {dims}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path, array):
    Path(path).write_bytes(encode(array))


def load(path):
    return decode(Path(path).read_bytes())
