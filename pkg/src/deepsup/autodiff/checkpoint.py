"""Versioned binary checkpoints.

Layout: magic ``DSUPCKPT``, u32 version, u32 record count, then one record per
parameter holding its value and velocity payloads (see :mod:`deepsup.tensorio`).
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

from .. import tensorio

MAGIC = b"DSUPCKPT"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, arrays: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> None:
    """Write ``{name: (value, velocity)}`` in insertion order."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        tensorio.write_header(fh, MAGIC, VERSION, len(arrays))
        for name, (value, velocity) in arrays.items():
            tensorio.write_record(fh, name, value, velocity)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    with open(path, "rb") as fh:
        version, count = tensorio.read_header(fh, MAGIC)
        if version != VERSION:
            raise tensorio.FormatError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            name, (value, velocity) = tensorio.read_record(fh, 2)
            out[name] = (value, velocity)
        if fh.read(1):
            raise tensorio.FormatError("trailing bytes after last checkpoint record")
    return out
