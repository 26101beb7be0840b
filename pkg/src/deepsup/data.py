"""In-memory labelled datasets and their binary file format.

File layout: magic ``DSUPDATA``, u32 version, u32 sample count, then per
sample a u32 record count followed by tensor records (``image``, one record per
label keyed by concept name, and ``meta.*`` scalars).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensorio

MAGIC = b"DSUPDATA"
VERSION = 1

OCCLUSION_TYPES = ("full", "truncated", "multi_object")


def occlusion_code(name: str) -> int:
    try:
        return OCCLUSION_TYPES.index(name)
    except ValueError:
        raise ValueError(f"unknown occlusion type {name!r}") from None


@dataclass
class Dataset:
    """Images ``(n, C, H, W)`` with label arrays ``(n, dim)`` and per-sample metadata ``(n,)``."""

    images: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        for k, v in {**self.labels, **self.meta}.items():
            if len(v) != n:
                raise ValueError(f"field {k!r} has {len(v)} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def occlusion_type(self) -> np.ndarray:
        if "occlusion_type" in self.meta:
            return self.meta["occlusion_type"].astype(np.int64)
        return np.zeros(len(self), dtype=np.int64)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], {k: v[idx] for k, v in self.labels.items()},
                       {k: v[idx] for k, v in self.meta.items()})

    def of_type(self, name: str) -> "Dataset":
        return self.subset(np.flatnonzero(self.occlusion_type == occlusion_code(name)))

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        first = parts[0]
        return cls(
            np.concatenate([p.images for p in parts]),
            {k: np.concatenate([p.labels[k] for p in parts]) for k in first.labels},
            {k: np.concatenate([p.meta[k] for p in parts]) for k in first.meta},
        )

    @classmethod
    def from_samples(cls, samples: Sequence[Mapping[str, np.ndarray]], label_keys: Sequence[str]) -> "Dataset":
        images = np.stack([s["image"] for s in samples]).astype(np.float32)
        labels = {k: np.stack([np.asarray(s[k], dtype=np.float32) for s in samples]) for k in label_keys}
        meta_keys = [k for k in samples[0] if k.startswith("meta.")] if samples else []
        meta = {k[5:]: np.array([float(s[k]) for s in samples], dtype=np.float32) for k in meta_keys}
        return cls(images, labels, meta)

    def save(self, path: str | os.PathLike) -> None:
        tmp = f"{os.fspath(path)}.tmp"
        n = len(self)
        with open(tmp, "wb") as fh:
            tensorio.write_header(fh, MAGIC, VERSION, n)
            lab = sorted(self.labels)
            met = sorted(self.meta)
            for i in range(n):
                tensorio.write_u32(fh, 1 + len(lab) + len(met))
                tensorio.write_record(fh, "image", self.images[i])
                for k in lab:
                    tensorio.write_record(fh, k, self.labels[k][i])
                for k in met:
                    tensorio.write_record(fh, f"meta.{k}", np.asarray([self.meta[k][i]]))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Dataset":
        samples = []
        with open(path, "rb") as fh:
            version, count = tensorio.read_header(fh, MAGIC)
            if version != VERSION:
                raise tensorio.FormatError(f"unsupported dataset version {version}")
            for _ in range(count):
                rec = {}
                for _ in range(tensorio.read_u32(fh)):
                    name, (arr,) = tensorio.read_record(fh)
                    rec[name] = arr
                samples.append(rec)
            if fh.read(1):
                raise tensorio.FormatError("trailing bytes after last sample")
        if not samples:
            return cls(np.zeros((0, 1, 1, 1), np.float32))
        label_keys = [k for k in samples[0] if k != "image" and not k.startswith("meta.")]
        images = np.stack([s["image"] for s in samples])
        labels = {k: np.stack([s[k] for s in samples]) for k in label_keys}
        meta = {k[5:]: np.array([s[k][0] for s in samples], dtype=np.float32)
                for k in samples[0] if k.startswith("meta.")}
        return cls(images, labels, meta)
