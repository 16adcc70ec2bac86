"""Binary tensor files.

Layout (all little-endian, row-major payload)::

    magic    4 bytes  b"AEQV"
    version  u16      currently 1
    ndim     u16
    dims     u64 * ndim
    elsize   u8       4 (float32) or 8 (float64)
    payload  prod(dims) * elsize bytes
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"AEQV"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype not in (np.float32, np.float64):
        t = t.astype(np.float64)
    dt = _DTYPES[t.dtype.itemsize]
    head = MAGIC + struct.pack("<HH", VERSION, t.ndim)
    head += struct.pack(f"<{t.ndim}Q", *t.shape)
    head += struct.pack("<B", dt.itemsize)
    return head + np.ascontiguousarray(t, dtype=dt).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise DataError("not an AEQV tensor (bad magic)")
    version, ndim = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise DataError(f"unsupported tensor format version {version}")
    off = 8
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    (elsize,) = struct.unpack_from("<B", buf, off)
    off += 1
    if elsize not in _DTYPES:
        raise DataError(f"bad element size flag {elsize}")
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != count * elsize:
        raise DataError(f"payload is {len(buf) - off} bytes, expected {count * elsize}")
    arr = np.frombuffer(buf, dtype=_DTYPES[elsize], count=count, offset=off)
    return arr.reshape(dims).astype(_DTYPES[elsize].newbyteorder("="))


def write_tensor(path, t: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(t))


def read_tensor(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
