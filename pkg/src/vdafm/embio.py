"""Reader/writer for the EMB1 dense matrix format.

Layout: 4-byte magic ``EMB1``, uint32 rows, uint32 cols (little-endian),
then ``rows * cols`` little-endian float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import CorruptFile

MAGIC = b"EMB1"
HEADER = struct.Struct("<4sII")


def encode_emb(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"EMB1 holds 2-D matrices, got shape {m.shape}")
    rows, cols = m.shape
    body = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, rows, cols) + body


def decode_emb(buf: bytes, offset: int = 0, source: str = "<buffer>") -> tuple[np.ndarray, int]:
    """Decode one block starting at ``offset``; returns (float64 matrix, next offset)."""
    if len(buf) - offset < HEADER.size:
        raise CorruptFile(f"{source}: truncated EMB1 header")
    magic, rows, cols = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise CorruptFile(f"{source}: bad magic {magic!r}")
    start = offset + HEADER.size
    end = start + 4 * rows * cols
    if end > len(buf):
        raise CorruptFile(
            f"{source}: expected {rows}x{cols} floats, only {(len(buf) - start) // 4} present"
        )
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=start)
    return data.astype(np.float64).reshape(rows, cols), end


def write_emb(path: str | Path | BinaryIO, matrix: np.ndarray) -> None:
    payload = encode_emb(matrix)
    if hasattr(path, "write"):
        path.write(payload)
        return
    Path(path).write_bytes(payload)


def read_emb(path: str | Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    matrix, end = decode_emb(buf, 0, source=str(path))
    if end != len(buf):
        raise CorruptFile(f"{path}: {len(buf) - end} trailing bytes after matrix")
    return matrix
