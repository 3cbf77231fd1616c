"""SMX1 matrix files: b"SMX1", u32-LE rows, u32-LE cols, float64-LE payload
in row-major order. No padding, no checksum."""

import struct

import numpy as np

from .errors import BadMagic, TruncatedFile
from .linalg import as_matrix

MAGIC = b"SMX1"
_HEADER = struct.Struct("<II")


def write_matrix(path, m):
    m = as_matrix(m, "m")
    rows, cols = m.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(rows, cols))
        f.write(m.astype("<f8", copy=False).tobytes(order="C"))


def read_matrix(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise BadMagic(f"{path}: expected {MAGIC!r}, got {magic!r}")
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise TruncatedFile(f"{path}: header cut short")
        rows, cols = _HEADER.unpack(header)
        if rows == 0 or cols == 0:
            raise BadMagic(f"{path}: non-positive dimensions {rows}x{cols}")
        nbytes = 8 * rows * cols
        payload = f.read(nbytes)
        if len(payload) < nbytes:
            raise TruncatedFile(
                f"{path}: payload has {len(payload)} of {nbytes} bytes"
            )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return as_matrix(values.reshape(rows, cols), str(path))
