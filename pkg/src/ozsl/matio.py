"""Dense float64 matrices and their flat binary serialization.

A matrix in this package is a 2-D, C-contiguous, float64 numpy array with
only finite entries.  The binary format is:

    magic  "OZSLMAT1" (8 bytes)
    rows   u32 little-endian
    cols   u32 little-endian
    data   rows*cols float64 little-endian, row-major

Every feature, embedding, and checkpoint file is built from this block.
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO

import numpy as np

from .errors import DimensionError, NonFiniteError, ValidationError

MAGIC = b"OZSLMAT1"


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce `data` to a validated matrix, optionally checking its shape."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    if rows is not None and arr.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {arr.shape[1]}")
    if not math.isfinite(arr.sum()):  # any NaN/Inf poisons the sum
        raise NonFiniteError("matrix contains NaN or Inf")
    return arr


def write_matrix(fh: BinaryIO, mat: np.ndarray) -> None:
    mat = as_matrix(mat)
    rows, cols = mat.shape
    fh.write(MAGIC)
    fh.write(struct.pack("<II", rows, cols))
    fh.write(mat.astype("<f8", copy=False).tobytes(order="C"))


def read_matrix(fh: BinaryIO) -> np.ndarray:
    head = fh.read(16)
    if len(head) != 16 or head[:8] != MAGIC:
        raise ValidationError("not an OZSLMAT1 block")
    rows, cols = struct.unpack("<II", head[8:])
    payload = fh.read(rows * cols * 8)
    if len(payload) != rows * cols * 8:
        raise ValidationError("truncated OZSLMAT1 block")
    mat = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
    return as_matrix(mat)


def save_matrix(path, mat: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, mat)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        mat = read_matrix(fh)
        if fh.read(1):
            raise ValidationError(f"{path}: trailing bytes after matrix payload")
    return mat
