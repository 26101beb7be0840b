"""Keypoint evaluation: 2D/3D PCK, APK, mean recall and ground-plane yaw error.

2D keypoints are in pixels and judged within a closed ball of radius
``alpha * max(width, height)``, counting only keypoints visible in the
groundtruth. 3D keypoints are in normalized object units and count when
strictly closer than ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

RECALL_GRID = np.arange(1, 101) / 100.0


@dataclass
class EvalRecord:
    """One object's predictions next to its groundtruth.

    ``score`` is the per-keypoint confidence used by APK (higher means more
    likely visible).
    """

    pred_kp2d: np.ndarray
    gt_kp2d: np.ndarray
    gt_visible: np.ndarray
    width: float
    height: float
    pred_kp3d: Optional[np.ndarray] = None
    gt_kp3d: Optional[np.ndarray] = None
    score: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pred_kp2d = np.asarray(self.pred_kp2d, dtype=np.float64).reshape(-1, 2)
        self.gt_kp2d = np.asarray(self.gt_kp2d, dtype=np.float64).reshape(-1, 2)
        self.gt_visible = np.asarray(self.gt_visible, dtype=bool).ravel()
        n = len(self.gt_kp2d)
        if len(self.pred_kp2d) != n or len(self.gt_visible) != n:
            raise ValueError("prediction and groundtruth keypoint counts differ")
        if self.pred_kp3d is not None:
            self.pred_kp3d = np.asarray(self.pred_kp3d, dtype=np.float64).reshape(-1, 3)
            self.gt_kp3d = np.asarray(self.gt_kp3d, dtype=np.float64).reshape(-1, 3)
            if self.pred_kp3d.shape != self.gt_kp3d.shape:
                raise ValueError("3D prediction and groundtruth shapes differ")
        if self.score is not None:
            self.score = np.asarray(self.score, dtype=np.float64).ravel()
            if len(self.score) != n:
                raise ValueError("one score per keypoint is required")

    @property
    def L(self) -> float:
        return float(max(self.width, self.height))


def _stack(records: Sequence[EvalRecord], attr: str) -> np.ndarray:
    vals = [getattr(r, attr) for r in records]
    if any(v is None for v in vals):
        raise ValueError(f"every record needs {attr}")
    return np.stack(vals)


def _hits2d(records: Sequence[EvalRecord], alpha: float) -> np.ndarray:
    pred = _stack(records, "pred_kp2d")
    gt = _stack(records, "gt_kp2d")
    L = np.array([r.L for r in records])
    dist = np.hypot(pred[..., 0] - gt[..., 0], pred[..., 1] - gt[..., 1])
    return dist <= alpha * L[:, None]


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def pck2d(records: Sequence[EvalRecord], alpha: float) -> float:
    """Share of groundtruth-visible keypoints predicted within ``alpha * L`` pixels."""
    _check_alpha(alpha)
    vis = _stack(records, "gt_visible")
    if not vis.any():
        raise ValueError("no visible keypoints in the record set")
    return float(np.count_nonzero(_hits2d(records, alpha) & vis) / np.count_nonzero(vis))


def _dist3d(records: Sequence[EvalRecord]) -> np.ndarray:
    d = _stack(records, "pred_kp3d") - _stack(records, "gt_kp3d")
    return np.sqrt(np.sum(d * d, axis=-1))


def pck3d(records: Sequence[EvalRecord], alpha: float) -> float:
    """Share of 3D keypoints strictly closer than ``alpha`` to groundtruth."""
    d = _dist3d(records)
    return float(np.count_nonzero(d < alpha) / d.size)


def mean_recall(records: Sequence[EvalRecord], grid: np.ndarray = RECALL_GRID) -> float:
    """3D PCK averaged over ``alpha`` in 0.01, 0.02, ..., 1.00."""
    d = _dist3d(records).ravel()
    return float(np.mean([np.count_nonzero(d < a) / d.size for a in grid]))


def average_precision(scores: np.ndarray, correct: np.ndarray, n_pos: int) -> float:
    """All-points interpolated AP; equal scores enter the PR curve as one step."""
    if n_pos <= 0:
        raise ValueError("average precision needs at least one positive")
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, c = scores[order], correct[order]
    tp = np.cumsum(c)
    fp = np.cumsum(~c)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    recall = tp[ends] / n_pos
    precision = tp[ends] / (tp[ends] + fp[ends])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def apk(records: Sequence[EvalRecord], alpha: float) -> float:
    """Mean over keypoint types of detection AP at radius ``alpha * L``.

    A prediction is correct when its groundtruth keypoint is visible and within
    the radius. Types with no visible groundtruth are left out of the mean;
    NaN is returned when no type has one.
    """
    _check_alpha(alpha)
    vis = _stack(records, "gt_visible")
    scores = _stack(records, "score")
    correct = _hits2d(records, alpha) & vis
    aps = []
    for j in range(vis.shape[1]):
        n_pos = int(np.count_nonzero(vis[:, j]))
        if n_pos:
            aps.append(average_precision(scores[:, j], correct[:, j], n_pos))
    return float(np.mean(aps)) if aps else float("nan")


def wrap_axis(deg: np.ndarray) -> np.ndarray:
    """Map angles to (-90, 90] degrees (undirected axis)."""
    w = np.mod(np.asarray(deg, dtype=np.float64) + 90.0, 180.0) - 90.0
    return np.where(w == -90.0, 90.0, w)


def object_yaw(kp3d: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    """Axis direction of left-to-right lines on the ground plane (Z up), in degrees.

    Lines are undirected, so directions are averaged as doubled angles.
    """
    if not pairs:
        raise ValueError("keypoint schema declares no left/right pairs")
    kp = np.asarray(kp3d, dtype=np.float64).reshape(-1, 3)
    idx = np.asarray(pairs)
    d = kp[idx[:, 1], :2] - kp[idx[:, 0], :2]
    theta = np.arctan2(d[:, 1], d[:, 0])
    c, s = np.mean(np.cos(2 * theta)), np.mean(np.sin(2 * theta))
    return float(wrap_axis(np.rad2deg(np.arctan2(s, c) / 2)))


def yaw_error(records: Sequence[EvalRecord], pairs: Sequence[tuple[int, int]]) -> float:
    """Mean absolute ground-plane yaw difference in degrees."""
    errs = [abs(float(wrap_axis(object_yaw(r.pred_kp3d, pairs) - object_yaw(r.gt_kp3d, pairs))))
            for r in records]
    return float(np.mean(errs))


def records_from_arrays(pred_kp2d, gt_kp2d, gt_vis, size, pred_kp3d=None, gt_kp3d=None, score=None) -> list[EvalRecord]:
    """Build records from stacked normalized 2D keypoints of square ``size`` images."""
    n = len(gt_kp2d)
    out = []
    for i in range(n):
        out.append(EvalRecord(
            np.asarray(pred_kp2d[i]).reshape(-1, 2) * size,
            np.asarray(gt_kp2d[i]).reshape(-1, 2) * size,
            gt_vis[i], size, size,
            None if pred_kp3d is None else pred_kp3d[i],
            None if gt_kp3d is None else gt_kp3d[i],
            None if score is None else score[i],
        ))
    return out
