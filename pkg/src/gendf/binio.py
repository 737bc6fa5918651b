"""Little-endian binary helpers shared by the model, dataset and feature files.

Every tensor is written as ``int32 rank``, ``rank x int32 extents`` and then the
entries as float64 in row-major order.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


def write_i32(f: BinaryIO, *values: int) -> None:
    f.write(struct.pack(f"<{len(values)}i", *values))


def read_i32(f: BinaryIO, count: int = 1) -> tuple[int, ...]:
    raw = _read_exact(f, 4 * count)
    return struct.unpack(f"<{count}i", raw)


def write_f64(f: BinaryIO, *values: float) -> None:
    f.write(struct.pack(f"<{len(values)}d", *values))


def read_f64(f: BinaryIO, count: int = 1) -> tuple[float, ...]:
    return struct.unpack(f"<{count}d", _read_exact(f, 8 * count))


def write_array(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    write_i32(f, arr.ndim, *arr.shape)
    f.write(np.ascontiguousarray(arr).tobytes())


def read_array(f: BinaryIO) -> np.ndarray:
    (rank,) = read_i32(f)
    shape = read_i32(f, rank) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def write_tag(f: BinaryIO, tag: str) -> None:
    raw = tag.encode("ascii")
    write_i32(f, len(raw))
    f.write(raw)


def read_tag(f: BinaryIO) -> str | None:
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise EOFError("truncated section tag")
    (n,) = struct.unpack("<i", head)
    return _read_exact(f, n).decode("ascii")


def _read_exact(f: BinaryIO, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise EOFError(f"expected {n} bytes, got {len(raw)}")
    return raw
