"""Binary float-array files for the reference activation pack.

Each ``.bin`` file is little-endian throughout: a uint32 rank, then rank
uint64 dimension sizes, then the float32 payload in C order. The header
carries no dtype tag; float32 is fixed by the format contract.
"""
from __future__ import annotations

import struct
from math import prod
from pathlib import Path

import numpy as np

# Sanity bound so a corrupt header cannot ask for a huge shape tuple.
_MAX_RANK = 16


def write_array(path: str | Path, arr: np.ndarray) -> None:
    """Write one array as a little-endian rank/dims/float32 record."""
    # asarray keeps 0-d inputs 0-d; tobytes already serializes in C order.
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_array(path: str | Path) -> np.ndarray:
    """Read a record written by write_array; raises ValueError on corruption."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated before the rank field")
    (rank,) = struct.unpack_from("<I", raw, 0)
    if rank > _MAX_RANK:
        raise ValueError(f"{path}: implausible rank {rank}")
    header = 4 + 8 * rank
    if len(raw) < header:
        raise ValueError(f"{path}: truncated inside the shape header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 4)
    count = prod(shape)
    expected = header + 4 * count
    if len(raw) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for shape {tuple(shape)}, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=header, count=count)
    return data.reshape(shape).copy()
