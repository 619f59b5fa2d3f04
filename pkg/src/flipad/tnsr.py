"""Reader/writer for the TNSR binary tensor format.

Layout (all integers little-endian)::

    b"TNSR"  u8 version (=1)  u8 dtype (0=f32, 1=f64)
    u32 ndim  ndim * u32 dims  row-major payload
"""

import struct
from pathlib import Path

import numpy as np

from .errors import TnsrFormatError

MAGIC = b"TNSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(array, dtype=None):
    """Serialize ``array`` to TNSR bytes. ``dtype`` may force ``float32``/``float64``."""
    arr = np.asarray(array)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[np.dtype(arr.dtype)]
    if any(d >= 2**32 for d in arr.shape):
        raise ValueError("dimension does not fit in u32")
    header = MAGIC + struct.pack("<BBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode(buf):
    """Parse TNSR bytes into a numpy array (dtype as stored)."""
    buf = memoryview(bytes(buf))
    if len(buf) < 10:
        raise TnsrFormatError("truncated header", offset=len(buf))
    if bytes(buf[:4]) != MAGIC:
        raise TnsrFormatError("bad magic", offset=0)
    version, code, ndim = struct.unpack_from("<BBI", buf, 4)
    if version != VERSION:
        raise TnsrFormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPES:
        raise TnsrFormatError(f"unknown dtype code {code}", offset=5)
    pos = 10
    if len(buf) < pos + 4 * ndim:
        raise TnsrFormatError("truncated dims", offset=len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    expected = pos + n * dt.itemsize
    if len(buf) != expected:
        raise TnsrFormatError(
            f"payload size mismatch: expected {expected} bytes total, got {len(buf)}",
            offset=min(len(buf), expected),
        )
    return np.frombuffer(buf[pos:], dtype=dt).reshape(dims).copy()


def save(path, array, dtype=None):
    Path(path).write_bytes(encode(array, dtype=dtype))


def load(path):
    return decode(Path(path).read_bytes())
