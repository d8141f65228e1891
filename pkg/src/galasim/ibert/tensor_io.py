"""Tensor blob format: a 16-byte header then raw row-major INT8 bytes.

Header layout: magic ``QT8\\0`` (4 bytes), rows (u32 LE), cols (u32 LE),
reserved (u32). The same 16 bytes travel as the framing packet when a matrix
is streamed through the fabric.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"QT8\x00"
TENSOR_HEADER = struct.Struct("<4sIII")
TENSOR_HEADER_BYTES = TENSOR_HEADER.size   # 16


class TensorFormatError(ValueError):
    pass


def pack_tensor_header(rows: int, cols: int) -> bytes:
    return TENSOR_HEADER.pack(TENSOR_MAGIC, rows, cols, 0)


def unpack_tensor_header(raw: bytes) -> tuple[int, int]:
    if len(raw) != TENSOR_HEADER_BYTES:
        raise TensorFormatError(f"tensor header must be {TENSOR_HEADER_BYTES} bytes")
    magic, rows, cols, _ = TENSOR_HEADER.unpack(raw)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    return rows, cols


def dump_tensor(data: np.ndarray) -> bytes:
    data = np.ascontiguousarray(data, dtype=np.int8)
    if data.ndim != 2:
        raise TensorFormatError(f"tensor must be 2-D, got shape {data.shape}")
    return pack_tensor_header(*data.shape) + data.tobytes()


def load_tensor(raw: bytes) -> np.ndarray:
    rows, cols = unpack_tensor_header(raw[:TENSOR_HEADER_BYTES])
    body = raw[TENSOR_HEADER_BYTES:]
    if len(body) != rows * cols:
        raise TensorFormatError(
            f"tensor body has {len(body)} bytes, header says {rows}x{cols}")
    return np.frombuffer(body, dtype=np.int8).reshape(rows, cols).copy()


def write_tensor(path: str | Path, data: np.ndarray) -> None:
    Path(path).write_bytes(dump_tensor(data))


def read_tensor(path: str | Path) -> np.ndarray:
    return load_tensor(Path(path).read_bytes())
