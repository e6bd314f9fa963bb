"""Packed binary tensor files.

Layout: 4-byte magic ``T5v1``, five little-endian uint32 dims in
(batch, channel, time, height, width) order, then the float64 payload in
C order. Arrays of lower rank are left-padded with singleton dims on save;
the stored shape is always exactly five entries.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError

MAGIC = b"T5v1"
_HEADER = struct.Struct("<4s5I")

__all__ = ["save_tensor", "load_tensor", "MAGIC"]


def save_tensor(path, array) -> None:
    """Write an array (rank <= 5) as a packed tensor file."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 5:
        raise ShapeError(f"packed tensor files hold at most 5 dims, got shape {arr.shape}")
    dims = (1,) * (5 - arr.ndim) + arr.shape
    payload = np.ascontiguousarray(arr.reshape(dims), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *dims))
        fh.write(payload.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a packed tensor file back as a float64 array with its 5-entry shape."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ShapeError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ShapeError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    count = int(np.prod(dims))
    expected = _HEADER.size + 8 * count
    if len(raw) != expected:
        raise ShapeError(
            f"{path}: payload length {len(raw) - _HEADER.size} does not match dims {tuple(dims)}"
        )
    arr = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(dims)
    arr = arr.astype(np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{path}: stored tensor contains non-finite values")
    return arr
