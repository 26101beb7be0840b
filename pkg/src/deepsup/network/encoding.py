"""Label encodings for the pose and visibility concepts."""

from __future__ import annotations

import numpy as np


def pose_bin(azimuth_degrees: float, K: int) -> int:
    if K < 1:
        raise ValueError("K must be >= 1")
    frac = (float(azimuth_degrees) % 360.0) / 360.0
    return min(int(np.floor(frac * K)), K - 1)


def encode_pose(azimuth_degrees: float, K: int) -> np.ndarray:
    """One-hot azimuth bin out of ``K`` equal bins starting at 0 degrees."""
    out = np.zeros(K, dtype=np.float32)
    out[pose_bin(azimuth_degrees, K)] = 1.0
    return out


def encode_visibility(visible) -> np.ndarray:
    """1 marks an occluded keypoint, 0 a visible one."""
    return (~np.asarray(visible, dtype=bool)).astype(np.float32)


def decode_visibility(code, threshold: float = 0.5) -> np.ndarray:
    """Inverse of :func:`encode_visibility`; returns per-keypoint visible flags."""
    return np.asarray(code, dtype=np.float64) < threshold
