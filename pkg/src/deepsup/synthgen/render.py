"""Ray-cast rasterizer with a z-buffer, per-keypoint visibility and occlusion.

Every pixel casts one ray through its centre against all box solids. The
nearest hit gives depth, instance id and a flat per-face shade. A keypoint is
visible when it projects inside the image and the ray through its exact
sub-pixel projection hits nothing more than ``tau`` in front of it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import Camera, CameraError
from .geometry import GeometryError, Instance, aabb_disjoint, sample_instance

LIGHT = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])
TAU_FACTOR = 1e-3


class OcclusionError(RuntimeError):
    """Could not place an occluder that yields the requested ratio band."""


@dataclass
class Hits:
    depth: np.ndarray
    instance: np.ndarray
    box: np.ndarray
    face: np.ndarray


def _slab(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Entry parameter and entry face (0..5 = -x,+x,-y,+y,-z,+z) per ray; inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    flat = dirs == 0
    if np.any(flat):
        inside = (origin >= lo) & (origin <= hi)
        t1 = np.where(flat, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(flat, np.inf, t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    axis = np.argmax(tmin, axis=1)
    rows = np.arange(len(dirs))
    tnear = tmin[rows, axis]
    tfar = tmax.min(axis=1)
    hit = (tnear <= tfar) & (tnear > 0)
    entered_low = t1[rows, axis] <= t2[rows, axis]
    face = 2 * axis + np.where(entered_low, 0, 1)
    return np.where(hit, tnear, np.inf), face


def cast(scene: Sequence[Instance], origin: np.ndarray, dirs: np.ndarray) -> Hits:
    """Nearest hit of each ray against every solid in the scene."""
    m = len(dirs)
    best = np.full(m, np.inf)
    inst = np.full(m, -1, dtype=np.int64)
    boxi = np.full(m, -1, dtype=np.int64)
    face = np.full(m, -1, dtype=np.int64)
    for k, ins in enumerate(scene):
        R = ins.rotation
        o = (origin - ins.offset) @ R
        d = dirs @ R
        for b, box in enumerate(ins.model.solids):
            t, f = _slab(o, d, box.lo, box.hi)
            closer = t < best
            best = np.where(closer, t, best)
            inst[closer] = k
            boxi[closer] = b
            face[closer] = f[closer]
    return Hits(best, inst, boxi, face)


@dataclass
class InstanceLabels:
    uv: np.ndarray
    depth: np.ndarray
    visible: np.ndarray
    in_frame: np.ndarray


@dataclass
class Render:
    image: np.ndarray
    depth: np.ndarray
    ids: np.ndarray
    labels: list[InstanceLabels]

    @property
    def mask(self) -> np.ndarray:
        return self.ids >= 0


def _face_normals(scene: Sequence[Instance]) -> list[np.ndarray]:
    local = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.float64)
    return [local @ ins.rotation.T for ins in scene]


def keypoint_visibility(scene: Sequence[Instance], camera: Camera, size: int, index: int) -> InstanceLabels:
    kp = scene[index].keypoints_world()
    uvz = camera.project(kp)
    uv, z = uvz[:, :2], uvz[:, 2]
    in_frame = np.all((uv >= 0) & (uv <= size), axis=1)
    hits = cast(scene, camera.center, camera.rays_through(uv))
    tau = TAU_FACTOR * camera.distance
    visible = in_frame & (z <= hits.depth + tau)
    return InstanceLabels(uv, z, visible, in_frame)


def render(scene: Sequence[Instance], camera: Camera, size: int,
           rng: Optional[np.random.Generator] = None) -> Render:
    """Rasterize ``scene`` to a ``size`` x ``size`` grayscale image in [0, 1].

    ``rng`` draws a base shade per instance and a jitter per face; without it
    shading is deterministic.
    """
    if not scene:
        raise GeometryError("render needs at least one instance")
    for ins in scene:
        if np.any(camera.to_camera(ins.to_world(ins.model.corners()))[:, 2] <= 0):
            raise CameraError("instance extends behind the camera")
    hits = cast(scene, camera.center, camera.pixel_rays(size))
    n_box = max(len(ins.model.solids) for ins in scene)
    if rng is not None:
        base = rng.uniform(0.35, 0.9, size=len(scene))
        jitter = rng.uniform(-0.05, 0.05, size=(len(scene), n_box, 6))
    else:
        base = np.full(len(scene), 0.7)
        jitter = np.zeros((len(scene), n_box, 6))
    normals = _face_normals(scene)
    shade = np.zeros(size * size)
    for k in range(len(scene)):
        sel = hits.instance == k
        if not np.any(sel):
            continue
        lam = np.abs(normals[k][hits.face[sel]] @ LIGHT)
        shade[sel] = base[k] * (0.55 + 0.45 * lam) + jitter[k, hits.box[sel], hits.face[sel]]
    image = np.clip(shade, 0, 1).reshape(size, size).astype(np.float32)
    labels = [keypoint_visibility(scene, camera, size, i) for i in range(len(scene))]
    return Render(image, hits.depth.reshape(size, size), hits.instance.reshape(size, size), labels)


def occlusion_ratio(scene: Sequence[Instance], index: int, camera: Camera, size: int,
                    full: Optional[Render] = None) -> float:
    """Visible pixels of instance ``index`` in the scene over its pixels when rendered alone."""
    solo = render([scene[index]], camera, size)
    area = int(np.count_nonzero(solo.ids == 0))
    if area == 0:
        raise GeometryError("instance covers no pixels when rendered alone")
    full = full if full is not None else render(scene, camera, size)
    return np.count_nonzero(full.ids == index) / area


def sample_camera(rng: np.random.Generator, radius: float, extent: float, size: int) -> Camera:
    """Azimuth in [0, 360), elevation in [0, 30], distance in [3, 8] object lengths."""
    az = float(rng.uniform(0.0, 360.0))
    el = float(rng.uniform(0.0, 30.0))
    dist = float(rng.uniform(3.0, 8.0)) * extent
    return Camera.framing(az, el, dist, radius, size)


@dataclass
class OccludedScene:
    instances: list[Instance]
    camera: Camera
    ratio: float
    attempts: int


def make_occluded_pair(family: str, rng: np.random.Generator, size: int, *, camera: Optional[Camera] = None,
                       band: tuple[float, float] = (0.4, 0.9), max_tries: int = 500,
                       target=None) -> OccludedScene:
    """Target at the origin plus one same-family occluder placed between it and the camera.

    The occluder stands on the target's ground plane. Placements whose world
    boxes overlap the target's, or whose ratio falls outside ``band``, are
    rejected.
    """
    target = target if target is not None else sample_instance(family, rng)
    tgt = Instance(target)
    if camera is None:
        camera = sample_camera(rng, target.radius(), target.extent(), size)
    solo = render([tgt], camera, size)
    area = int(np.count_nonzero(solo.ids == 0))
    if area == 0:
        raise GeometryError("target covers no pixels")
    a = np.deg2rad(camera.azimuth)
    toward = np.array([np.cos(a), np.sin(a), 0.0])
    side = np.array([-np.sin(a), np.cos(a), 0.0])
    ground = tgt.world_aabb()[0][2]
    for attempt in range(1, max_tries + 1):
        occ_model = sample_instance(family, rng)
        yaw = float(rng.uniform(0.0, 360.0))
        reach = target.radius() + occ_model.radius()
        along = float(rng.uniform(0.7, 1.2)) * reach
        lateral = float(rng.uniform(-0.55, 0.55)) * reach
        occ = Instance(occ_model, yaw, along * toward + lateral * side)
        occ.offset[2] += ground - occ.world_aabb()[0][2]
        if not aabb_disjoint(tgt, occ):
            continue
        if np.any(camera.to_camera(occ.to_world(occ_model.corners()))[:, 2] <= 1e-6):
            continue
        ids = cast([tgt, occ], camera.center, camera.pixel_rays(size)).instance
        ratio = np.count_nonzero(ids == 0) / area
        if band[0] <= ratio <= band[1]:
            return OccludedScene([tgt, occ], camera, float(ratio), attempt)
    raise OcclusionError(f"no occluder placement within {band} after {max_tries} tries")
