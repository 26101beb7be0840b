"""Coarse/fine classification data: procedural glyphs and the CIFAR-100 binary format."""

from __future__ import annotations

import os
from typing import Mapping, Optional, Sequence

import numpy as np

from ..data import Dataset
from ..tensorio import FormatError

CIFAR_RECORD = 3074
CIFAR_COARSE = 20
CIFAR_FINE = 100


def _disk(x, y):
    return x ** 2 + y ** 2 <= 1


def _ring(x, y):
    r2 = x ** 2 + y ** 2
    return (r2 <= 1) & (r2 >= 0.45)


def _ellipse(x, y):
    return (x / 1.0) ** 2 + (y / 0.55) ** 2 <= 1


def _square(x, y):
    return (np.abs(x) <= 0.85) & (np.abs(y) <= 0.85)


def _triangle(x, y):
    return (y <= 0.8) & (y >= -0.8 + 1.6 * np.abs(x)) & (np.abs(x) <= 1)


def _diamond(x, y):
    return np.abs(x) + np.abs(y) <= 1


def _hbar(x, y):
    return (np.abs(y) <= 0.25) & (np.abs(x) <= 1)


def _vbar(x, y):
    return (np.abs(x) <= 0.25) & (np.abs(y) <= 1)


def _cross(x, y):
    return _hbar(x, y) | _vbar(x, y)


GLYPHS = {
    "disk": _disk, "ring": _ring, "ellipse": _ellipse,
    "square": _square, "triangle": _triangle, "diamond": _diamond,
    "hbar": _hbar, "vbar": _vbar, "cross": _cross,
}

DEFAULT_TAXONOMY: dict[str, list[str]] = {
    "round": ["disk", "ring", "ellipse"],
    "angular": ["square", "triangle", "diamond"],
    "stroke": ["hbar", "vbar", "cross"],
}


def flatten_taxonomy(taxonomy: Mapping[str, Sequence[str]]) -> tuple[list[str], list[str], dict[int, int]]:
    """Coarse names, fine names and the fine-id -> coarse-id partition."""
    coarse = list(taxonomy)
    fine: list[str] = []
    parent: dict[int, int] = {}
    for ci, c in enumerate(coarse):
        for f in taxonomy[c]:
            if f in fine:
                raise ValueError(f"fine class {f!r} listed under more than one coarse class")
            parent[len(fine)] = ci
            fine.append(f)
    if not fine:
        raise ValueError("taxonomy has no fine classes")
    return coarse, fine, parent


def draw_glyph(name: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One jittered glyph on a noisy background, values in [0, 1]."""
    try:
        shape = GLYPHS[name]
    except KeyError:
        raise ValueError(f"no glyph named {name!r}") from None
    t = (np.arange(size) + 0.5) / size * 2 - 1
    y, x = np.meshgrid(t, t, indexing="ij")
    scale = rng.uniform(0.55, 0.8)
    dx, dy = rng.uniform(-0.15, 0.15, size=2)
    ang = np.deg2rad(rng.uniform(-10, 10))
    c, s = np.cos(ang), np.sin(ang)
    xr = (c * (x - dx) + s * (y - dy)) / scale
    yr = (-s * (x - dx) + c * (y - dy)) / scale
    fg, bg = rng.uniform(0.6, 0.95), rng.uniform(0.05, 0.35)
    img = np.where(shape(xr, yr), fg, bg) + rng.normal(0, 0.05, size=(size, size))
    return np.clip(img, 0, 1).astype(np.float32)


def _onehot(ids: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(ids), k), dtype=np.float32)
    out[np.arange(len(ids)), ids] = 1
    return out


def gen_hierarchical_classification(count: int, rng: np.random.Generator,
                                    taxonomy: Optional[Mapping[str, Sequence[str]]] = None,
                                    size: int = 32) -> Dataset:
    """Uniform fine classes; the coarse label is always the fine class's parent."""
    coarse, fine, parent = flatten_taxonomy(taxonomy or DEFAULT_TAXONOMY)
    fine_ids = rng.integers(len(fine), size=count)
    coarse_ids = np.array([parent[int(f)] for f in fine_ids], dtype=np.int64)
    images = np.stack([draw_glyph(fine[int(f)], rng, size)[None] for f in fine_ids]) if count else \
        np.zeros((0, 1, size, size), np.float32)
    return Dataset(
        images,
        {"coarse": _onehot(coarse_ids, len(coarse)), "fine": _onehot(fine_ids, len(fine))},
        {"coarse_id": coarse_ids.astype(np.float32), "fine_id": fine_ids.astype(np.float32)},
    )


def load_cifar100(path: str | os.PathLike) -> Dataset:
    """Parse a CIFAR-100 binary file: per record coarse byte, fine byte, 3x32x32 planar pixels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    coarse, fine = rec[:, 0].astype(np.int64), rec[:, 1].astype(np.int64)
    if coarse.max() >= CIFAR_COARSE:
        raise FormatError(f"{path}: coarse label {coarse.max()} out of range")
    if fine.max() >= CIFAR_FINE:
        raise FormatError(f"{path}: fine label {fine.max()} out of range")
    images = rec[:, 2:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(
        images,
        {"coarse": _onehot(coarse, CIFAR_COARSE), "fine": _onehot(fine, CIFAR_FINE)},
        {"coarse_id": coarse.astype(np.float32), "fine_id": fine.astype(np.float32)},
    )
