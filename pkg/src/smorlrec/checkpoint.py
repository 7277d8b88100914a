"""Versioned binary container for named float64/int64 arrays plus JSON metadata.

Layout (little-endian)::

    b"SMORLCK1"
    u64 metadata length, metadata as UTF-8 JSON
    u64 array count
    per array: u32 name length, name, u8 dtype code, u32 ndim, u64 dims..., raw bytes
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SMORLCK1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dt = np.dtype("<i8") if arr.dtype.kind in "iu" else np.dtype("<f8")
            arr = np.ascontiguousarray(arr, dtype=dt)
            key = name.encode()
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<BI", _CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Return (arrays, meta)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC.decode()} container")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (mlen,) = take("<Q")
    meta = json.loads(data[pos : pos + mlen].decode())
    pos += mlen
    (count,) = take("<Q")
    arrays = {}
    for _ in range(count):
        (klen,) = take("<I")
        name = data[pos : pos + klen].decode()
        pos += klen
        code, ndim = take("<BI")
        shape = take(f"<{ndim}Q")
        dt = _DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return arrays, meta


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
