"""Binary tensor records shared by checkpoints, datasets and shape models.

A record is::

    u32 name length | UTF-8 name | u8 rank | u32 extent * rank | f32 payload(s)

All integers and floats are little-endian. Checkpoint records carry two
payloads (value, velocity); dataset and model records carry one.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a binary file does not follow the expected layout."""


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_header(fh: BinaryIO, magic: bytes, version: int, count: int) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    fh.write(magic)
    fh.write(struct.pack("<II", version, count))


def read_header(fh: BinaryIO, magic: bytes) -> tuple[int, int]:
    got = _read_exact(fh, 8)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    return struct.unpack("<II", _read_exact(fh, 8))


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def write_record(fh: BinaryIO, name: str, *payloads: np.ndarray) -> None:
    """Write one named record; every payload must share the first one's shape."""
    shape = np.shape(payloads[0])
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", len(shape)))
    fh.write(struct.pack(f"<{len(shape)}I", *shape))
    for p in payloads:
        arr = np.asarray(p, dtype="<f4")
        if arr.shape != shape:
            raise ValueError(f"payload shape {arr.shape} != {shape} for record {name!r}")
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_record(fh: BinaryIO, n_payloads: int = 1) -> tuple[str, list[np.ndarray]]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    size = int(np.prod(shape, dtype=np.int64))
    out = []
    for _ in range(n_payloads):
        buf = _read_exact(fh, 4 * size)
        out.append(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32))
    return name, out
