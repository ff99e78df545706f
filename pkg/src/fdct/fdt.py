"""FDT tensor files.

Layout (all little-endian): magic ``b"FDT1"``, uint32 rank, ``rank`` uint32
dims, then the row-major float32 payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DatasetError

MAGIC = b"FDT1"


def encode(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if any(n <= 0 for n in arr.shape):
        raise ValueError(f"FDT dims must be positive, got {arr.shape}")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise DatasetError(f"{source}: not an FDT file (bad magic)", path=source)
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise DatasetError(f"{source}: truncated header", path=source)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != head + 4 * count:
        raise DatasetError(f"{source}: payload has {len(buf) - head} bytes, expected {4 * count}",
                           path=source)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=head).reshape(dims).astype(np.float32)


def save(path, array) -> None:
    data = encode(array)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}", path=str(path)) from exc
    return decode(buf, source=str(path))
