"""ODET binary tensor format.

Layout (little-endian)::

    b"ODET" | u32 version=1 | u8 dtype | u8 ndim | u64 dims[ndim] | payload

dtype 0 is real f64; dtype 1 is complex f64 stored planar, the full real
plane followed by the full imaginary plane.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, InvalidArgumentError, MissingFileError

MAGIC = b"ODET"
VERSION = 1
REAL = 0
COMPLEX = 1

_HEAD = struct.Struct("<4sIBB")


def encode(array) -> bytes:
    a = np.asarray(array)
    if np.iscomplexobj(a):
        code = COMPLEX
        a = a.astype(np.complex128)
        payload = np.ascontiguousarray(a.real).astype("<f8").tobytes() + np.ascontiguousarray(
            a.imag
        ).astype("<f8").tobytes()
    else:
        code = REAL
        payload = np.ascontiguousarray(a, dtype="<f8").tobytes()
    if a.ndim > 255:
        raise InvalidArgumentError("too many dimensions")
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    return _HEAD.pack(MAGIC, VERSION, code, a.ndim) + dims + payload


def decode(buf: bytes, source="<bytes>") -> np.ndarray:
    """Parse one ODET blob; ``source`` names the origin in error messages."""
    if len(buf) < _HEAD.size:
        raise CorruptFileError(source, "truncated header")
    magic, version, code, ndim = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptFileError(source, f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(source, f"unsupported version {version}")
    if code not in (REAL, COMPLEX):
        raise CorruptFileError(source, f"unknown dtype code {code}")
    off = _HEAD.size
    if len(buf) < off + 8 * ndim:
        raise CorruptFileError(source, "truncated dims")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    planes = 2 if code == COMPLEX else 1
    expected = off + 8 * n * planes
    if len(buf) != expected:
        raise CorruptFileError(source, f"payload has {len(buf) - off} bytes, expected {expected - off}")
    flat = np.frombuffer(buf, dtype="<f8", count=n * planes, offset=off).astype(np.float64)
    if code == COMPLEX:
        out = np.empty(n, dtype=np.complex128)
        out.real = flat[:n]
        out.imag = flat[n:]
    else:
        out = flat.copy()
    return out.reshape(shape)


def write_tensor(path, array) -> None:
    """Write ``array`` atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(array))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    return decode(path.read_bytes(), source=path)
