"""Label normalization, truncation crops and procedural backgrounds."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

SIDES = ("left", "right", "top", "bottom")


def normalize_labels(kp3d: np.ndarray, kp2d_px: np.ndarray, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Centre 3D points on their bounding box and scale the longest side to 1; 2D pixels -> [0, 1]."""
    kp3d = np.asarray(kp3d, dtype=np.float64)
    if len(kp3d) < 2:
        raise ValueError("need at least two 3D points to normalize")
    lo, hi = kp3d.min(axis=0), kp3d.max(axis=0)
    ext = float((hi - lo).max())
    if ext <= 0:
        raise ValueError("all 3D points coincide")
    n3 = (kp3d - (lo + hi) / 2) / ext
    n2 = np.asarray(kp2d_px, dtype=np.float64) / float(image_size)
    return n3, n2


@dataclass
class Crop:
    """Normalized crop window ``[x0, x1] x [y0, y1]`` inside the unit square."""

    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0

    @classmethod
    def from_shifts(cls, shifts: dict[str, float]) -> "Crop":
        bad = set(shifts) - set(SIDES)
        if bad:
            raise ValueError(f"unknown sides {sorted(bad)}")
        return cls(shifts.get("left", 0.0), 1.0 - shifts.get("right", 0.0),
                   shifts.get("top", 0.0), 1.0 - shifts.get("bottom", 0.0))

    @property
    def identity(self) -> bool:
        return (self.x0, self.x1, self.y0, self.y1) == (0.0, 1.0, 0.0, 1.0)

    def map_points(self, kp2d: np.ndarray) -> np.ndarray:
        kp = np.asarray(kp2d, dtype=np.float64)
        return np.column_stack([(kp[:, 0] - self.x0) / (self.x1 - self.x0), (kp[:, 1] - self.y0) / (self.y1 - self.y0)])

    def source_grid(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Source pixel-index coordinates (rows, cols) sampled by each output pixel centre."""
        t = (np.arange(size) + 0.5) / size
        xs = (self.x0 + t * (self.x1 - self.x0)) * size - 0.5
        ys = (self.y0 + t * (self.y1 - self.y0)) * size - 0.5
        return np.meshgrid(ys, xs, indexing="ij")

    def resample(self, image: np.ndarray, order: int = 1) -> np.ndarray:
        if self.identity:
            return image.copy()
        rows, cols = self.source_grid(image.shape[-1])
        if image.ndim == 2:
            return ndimage.map_coordinates(image, [rows, cols], order=order, mode="nearest").astype(image.dtype)
        return np.stack([self.resample(ch, order) for ch in image])


def random_crop(rng: np.random.Generator, max_shift: float = 0.3) -> tuple[Crop, dict[str, float]]:
    """Pick two distinct image sides and move each inward by U[0, max_shift] of the size."""
    sides = rng.choice(len(SIDES), size=2, replace=False)
    amounts = rng.uniform(0.0, max_shift, size=2)
    shifts = {SIDES[int(s)]: float(a) for s, a in zip(sides, amounts)}
    return Crop.from_shifts(shifts), shifts


@dataclass
class Truncated:
    image: np.ndarray
    kp2d: np.ndarray
    visible: np.ndarray
    kept_fraction: float
    crop: Crop


def truncate(image: np.ndarray, kp2d: np.ndarray, visible: np.ndarray, mask: np.ndarray,
             rng: Optional[np.random.Generator] = None, crop: Optional[Crop] = None) -> Truncated:
    """Crop two sides and resample back to the original size.

    Keypoints that leave the crop become occluded. ``kept_fraction`` is the
    share of ``mask`` pixels whose centres stay inside the crop.
    """
    if crop is None:
        if rng is None:
            raise ValueError("truncate needs an rng or an explicit crop")
        crop, _ = random_crop(rng)
    new_kp = crop.map_points(kp2d)
    inside = np.all((new_kp >= 0) & (new_kp <= 1), axis=1)
    size = mask.shape[-1]
    centres = (np.arange(size) + 0.5) / size
    keep_x = (centres >= crop.x0) & (centres <= crop.x1)
    keep_y = (centres >= crop.y0) & (centres <= crop.y1)
    total = np.count_nonzero(mask)
    kept = np.count_nonzero(mask & keep_y[:, None] & keep_x[None, :]) / total if total else 0.0
    return Truncated(crop.resample(image), new_kp, np.asarray(visible, bool) & inside, float(kept), crop)


def value_noise(size: int, rng: np.random.Generator, octaves: int = 3, base_cells: int = 4) -> np.ndarray:
    """Sum of bilinearly upsampled random lattices, rescaled to [0.05, 0.95]."""
    out = np.zeros((size, size))
    amp = 1.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        lattice = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0.0, cells, size)
        rows, cols = np.meshgrid(coords, coords, indexing="ij")
        out += amp * ndimage.map_coordinates(lattice, [rows, cols], order=1)
        amp *= 0.5
    lo, hi = out.min(), out.max()
    out = (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)
    return 0.05 + 0.9 * out


def compose_background(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fill pixels outside ``mask`` with value noise; object pixels pass through untouched."""
    noise = value_noise(image.shape[-1], rng).astype(image.dtype)
    return np.where(mask, image, noise)
