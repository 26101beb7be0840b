"""Keypoint samples and train/val/test splits for the synthetic benchmark.

Each sample draws from its own stream ``(seed, DATA, split, index)`` and its
object from ``(seed, MODELS, model_id)``, so generation order never changes
the output. Train, validation and test draw model ids from disjoint pools.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import rng as rngmod
from ..data import OCCLUSION_TYPES, Dataset, occlusion_code
from ..network.encoding import encode_pose, encode_visibility
from .augment import compose_background, normalize_labels, truncate
from .camera import Camera
from .geometry import Instance, rot_z, sample_instance
from .render import OcclusionError, make_occluded_pair, render, sample_camera

SPLITS = ("train", "val", "test")


@dataclass
class SyntheticSample:
    image: np.ndarray
    azimuth: float
    elevation: float
    distance: float
    visibility: np.ndarray
    kp2d: np.ndarray
    kp3d: np.ndarray
    occlusion_type: str
    occlusion_ratio: float
    model_id: int
    distance_norm: float = 0.0
    mask: np.ndarray = field(repr=False, default=None)


def heading_frame(keypoints: np.ndarray, azimuth: float) -> np.ndarray:
    """Express object-frame points in the viewer's ground frame (camera azimuth rotated to 0)."""
    return np.asarray(keypoints) @ rot_z(np.deg2rad(-azimuth)).T


def make_sample(family: str, kind: str, model_id: int, rng: np.random.Generator, seed: int,
                size: int = 32, max_cameras: int = 5) -> SyntheticSample:
    """Render one labelled sample of occlusion type ``kind``."""
    occlusion_code(kind)
    model = sample_instance(family, rngmod.stream(seed, rngmod.MODELS, model_id))
    if kind == "multi_object":
        for attempt in range(max_cameras):
            try:
                pair = make_occluded_pair(family, rng, size, target=model)
                break
            except OcclusionError:
                if attempt == max_cameras - 1:
                    raise
        scene, camera, ratio = pair.instances, pair.camera, pair.ratio
    else:
        camera = sample_camera(rng, model.radius(), model.extent(), size)
        scene, ratio = [Instance(model)], 1.0
    r = render(scene, camera, size, rng)
    lab = r.labels[0]
    image = compose_background(r.image, r.mask, rng)
    kp3d, kp2d = normalize_labels(heading_frame(model.keypoints, camera.azimuth), lab.uv, size)
    visible = lab.visible
    mask = r.ids == 0
    if kind == "truncated":
        t = truncate(image, kp2d, visible, mask, rng)
        image, kp2d, visible, ratio = t.image, t.kp2d, t.visible, t.kept_fraction
        mask = t.crop.resample(mask.astype(np.float32), order=0) > 0.5
    kp = model.keypoints
    dist_norm = camera.distance / float((kp.max(axis=0) - kp.min(axis=0)).max())
    return SyntheticSample(image.astype(np.float32), camera.azimuth, camera.elevation, camera.distance,
                           visible, kp2d, kp3d, kind, float(ratio), model_id, dist_norm, mask)


@dataclass(frozen=True)
class GenConfig:
    family: str = "cuboid-vehicle"
    image_size: int = 32
    pose_bins: int = 8
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 1000
    models_train: int = 200
    models_val: int = 40
    models_test: int = 60
    mix: tuple[tuple[str, float], ...] = (("full", 1 / 3), ("truncated", 1 / 3), ("multi_object", 1 / 3))

    def count(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def model_pool(self, split: str) -> np.ndarray:
        sizes = (self.models_train, self.models_val, self.models_test)
        i = SPLITS.index(split)
        start = sum(sizes[:i])
        return np.arange(start, start + sizes[i])


def type_schedule(n: int, mix) -> list[str]:
    """Exact per-type counts (largest remainder), laid out in contiguous blocks."""
    names = [m[0] for m in mix]
    for nm in names:
        occlusion_code(nm)
    w = np.array([m[1] for m in mix], dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("mix weights must be non-negative with a positive sum")
    raw = n * w / w.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    out: list[str] = []
    for nm, c in zip(names, counts):
        out += [nm] * int(c)
    return out


def sample_to_record(s: SyntheticSample, pose_bins: int, index: int) -> dict[str, np.ndarray]:
    return {
        "image": s.image[None],
        "pose": encode_pose(s.azimuth, pose_bins),
        "vis": encode_visibility(s.visibility),
        "kp3d": s.kp3d.ravel(),
        "kp2d": s.kp2d.ravel(),
        "meta.occlusion_type": occlusion_code(s.occlusion_type),
        "meta.occlusion_ratio": s.occlusion_ratio,
        "meta.azimuth": s.azimuth,
        "meta.elevation": s.elevation,
        "meta.distance_norm": s.distance_norm,
        "meta.model_id": s.model_id,
        "meta.index": index,
    }


def _one(args) -> dict[str, np.ndarray]:
    cfg, split, seed, i, kind = args
    rng = rngmod.stream(seed, rngmod.DATA, SPLITS.index(split), i)
    pool = cfg.model_pool(split)
    model_id = int(pool[rng.integers(len(pool))])
    s = make_sample(cfg.family, kind, model_id, rng, seed, cfg.image_size)
    return sample_to_record(s, cfg.pose_bins, i)


def build_split(cfg: GenConfig, split: str, seed: int, workers: int = 1) -> Dataset:
    kinds = type_schedule(cfg.count(split), cfg.mix)
    jobs = [(cfg, split, seed, i, k) for i, k in enumerate(kinds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            recs = list(ex.map(_one, jobs, chunksize=64))
    else:
        recs = [_one(j) for j in jobs]
    return Dataset.from_samples(recs, ["pose", "vis", "kp3d", "kp2d"])


def build_benchmark(cfg: GenConfig, seed: int, workers: int = 1) -> dict[str, Dataset]:
    return {s: build_split(cfg, s, seed, workers) for s in SPLITS if cfg.count(s) > 0}
