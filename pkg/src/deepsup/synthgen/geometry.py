"""Procedural skeleton objects built from axis-aligned boxes.

Object frame: X forward, Y left, Z up. Every family is re-centred so the
bounding box of its keypoints is centred on the origin. Keypoints are box
corners, so they always lie on a solid's surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= p <= hi`` in its object's frame."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise GeometryError("box bounds must be 3-vectors")
        if np.any(hi - lo <= 0):
            raise GeometryError(f"degenerate box extent {hi - lo}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def corners(self) -> np.ndarray:
        """All 8 corners, index bit 0 picks x, bit 1 y, bit 2 z."""
        return np.array([[(self.lo, self.hi)[(i >> a) & 1][a] for a in range(3)] for i in range(8)])

    def contains(self, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)

    def on_surface(self, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        p = np.atleast_2d(p)
        touch = np.any(np.isclose(p, self.lo, atol=tol) | np.isclose(p, self.hi, atol=tol), axis=1)
        return self.contains(p, tol) & touch

    def shifted(self, offset: np.ndarray) -> "Box":
        return Box(self.lo + offset, self.hi + offset)


@dataclass
class SkeletonModel:
    """Keypoints, their connectivity and the solids that cast occlusion."""

    family: str
    keypoints: np.ndarray
    edges: list[tuple[int, int]]
    solids: list[Box]
    lr_pairs: list[tuple[int, int]]
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if not np.all(np.isfinite(self.keypoints)):
            raise GeometryError("non-finite keypoint")

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)

    def corners(self) -> np.ndarray:
        return np.concatenate([b.corners() for b in self.solids])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)

    def radius(self) -> float:
        """Radius of the origin-centred sphere enclosing every solid."""
        return float(np.linalg.norm(self.corners(), axis=1).max())

    def extent(self) -> float:
        lo, hi = self.bounds()
        return float((hi - lo).max())


def _centred(family, kps, edges, solids, pairs, params) -> SkeletonModel:
    kps = np.asarray(kps, dtype=np.float64)
    centre = (kps.min(axis=0) + kps.max(axis=0)) / 2
    return SkeletonModel(family, kps - centre, edges, [b.shifted(-centre) for b in solids], pairs, params)


def _uniform(rng: Optional[np.random.Generator], lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi)) if rng is not None else (lo + hi) / 2


def _check_positive(params: dict) -> None:
    bad = {k: v for k, v in params.items() if v <= 0}
    if bad:
        raise GeometryError(f"non-positive dimensions: {bad}")


def unit_cube(rng=None, **_) -> SkeletonModel:
    """Cube of side 1 with its 8 corners as keypoints; ignores ``rng``."""
    box = Box(np.full(3, -0.5), np.full(3, 0.5))
    kps = box.corners()
    edges = [(i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count("1") == 1]
    # bit 1 is y: left (y=+0.5) has bit set
    pairs = [(i | 2, i) for i in range(8) if not i & 2]
    return SkeletonModel("unit-cube", kps, edges, [box], pairs, {"side": 1.0})


def cuboid_vehicle(rng=None, **over) -> SkeletonModel:
    """Body box plus a narrower cabin on top.

    Keypoints (L = left, R = right): body bottom FL FR RL RR, body top FL FR RL
    RR, cabin roof FL FR RL RR.
    """
    p = {
        "length": _uniform(rng, 3.6, 4.8),
        "width": _uniform(rng, 1.6, 2.0),
        "body_height": _uniform(rng, 0.6, 0.9),
        "cabin_height": _uniform(rng, 0.4, 0.7),
        "cabin_length": _uniform(rng, 0.35, 0.5),
        "cabin_offset": _uniform(rng, -0.25, -0.15),
        "cabin_width": _uniform(rng, 0.8, 0.95),
    }
    p.update(over)
    _check_positive({k: v for k, v in p.items() if k != "cabin_offset"})
    L, W, hb, hc = p["length"], p["width"], p["body_height"], p["cabin_height"]
    cl = p["cabin_length"] * L
    cx = p["cabin_offset"] * L
    cw = p["cabin_width"] * W
    if cx - cl / 2 < -L / 2 or cx + cl / 2 > L / 2:
        raise GeometryError("cabin sticks out of the body")
    body = Box([-L / 2, -W / 2, 0], [L / 2, W / 2, hb])
    cabin = Box([cx - cl / 2, -cw / 2, hb], [cx + cl / 2, cw / 2, hb + hc])
    kps = []
    for z, (x0, x1, y) in ((0, (L / 2, -L / 2, W / 2)), (hb, (L / 2, -L / 2, W / 2)),
                           (hb + hc, (cx + cl / 2, cx - cl / 2, cw / 2))):
        kps += [[x0, y, z], [x0, -y, z], [x1, y, z], [x1, -y, z]]
    edges = []
    for base in (0, 4, 8):
        edges += [(base, base + 1), (base + 2, base + 3), (base, base + 2), (base + 1, base + 3)]
    edges += [(i, i + 4) for i in range(4)]
    pairs = [(2 * i, 2 * i + 1) for i in range(6)]
    return _centred("cuboid-vehicle", kps, edges, [body, cabin], pairs, p)


def chair_frame(rng=None, **over) -> SkeletonModel:
    """Seat slab on four legs with a backrest at the rear.

    Keypoints: seat top FL FR RL RR, leg bottoms FL FR RL RR, backrest top L R.
    """
    p = {
        "seat_width": _uniform(rng, 0.4, 0.6),
        "seat_depth": _uniform(rng, 0.4, 0.55),
        "seat_height": _uniform(rng, 0.4, 0.5),
        "seat_thickness": _uniform(rng, 0.03, 0.06),
        "leg_size": _uniform(rng, 0.03, 0.06),
        "back_height": _uniform(rng, 0.35, 0.55),
        "back_thickness": _uniform(rng, 0.03, 0.06),
    }
    p.update(over)
    _check_positive(p)
    w, d, hs, ts = p["seat_width"], p["seat_depth"], p["seat_height"], p["seat_thickness"]
    ls, hbk, tb = p["leg_size"], p["back_height"], p["back_thickness"]
    if ts >= hs or 2 * ls >= min(w, d) or tb >= d:
        raise GeometryError("chair parts do not fit together")
    seat = Box([-d / 2, -w / 2, hs - ts], [d / 2, w / 2, hs])
    legs = []
    corners = [(d / 2, w / 2), (d / 2, -w / 2), (-d / 2, w / 2), (-d / 2, -w / 2)]
    for x, y in corners:
        lx = (x - ls, x) if x > 0 else (x, x + ls)
        ly = (y - ls, y) if y > 0 else (y, y + ls)
        legs.append(Box([lx[0], ly[0], 0], [lx[1], ly[1], hs - ts]))
    back = Box([-d / 2, -w / 2, hs], [-d / 2 + tb, w / 2, hs + hbk])
    kps = [[x, y, hs] for x, y in corners] + [[x, y, 0] for x, y in corners]
    kps += [[-d / 2, w / 2, hs + hbk], [-d / 2, -w / 2, hs + hbk]]
    edges = [(0, 1), (2, 3), (0, 2), (1, 3)] + [(i, i + 4) for i in range(4)] + [(2, 8), (3, 9), (8, 9)]
    pairs = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
    return _centred("chair-frame", kps, edges, [seat, *legs, back], pairs, p)


FAMILIES: dict[str, Callable[..., SkeletonModel]] = {
    "unit-cube": unit_cube,
    "cuboid-vehicle": cuboid_vehicle,
    "chair-frame": chair_frame,
}


def sample_instance(family: str, rng: Optional[np.random.Generator] = None, **overrides) -> SkeletonModel:
    """Draw one instance; ``rng=None`` gives the family's mid-range instance."""
    try:
        build = FAMILIES[family]
    except KeyError:
        raise GeometryError(f"unknown family {family!r}; known: {sorted(FAMILIES)}") from None
    return build(rng, **overrides)


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Instance:
    """A model placed in the world by a yaw about Z and a translation."""

    model: SkeletonModel
    yaw: float = 0.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64)

    @property
    def rotation(self) -> np.ndarray:
        return rot_z(np.deg2rad(self.yaw))

    def to_world(self, p: np.ndarray) -> np.ndarray:
        return np.atleast_2d(p) @ self.rotation.T + self.offset

    def keypoints_world(self) -> np.ndarray:
        return self.to_world(self.model.keypoints)

    def world_aabb(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.to_world(self.model.corners())
        return c.min(axis=0), c.max(axis=0)


def aabb_disjoint(a: Instance, b: Instance) -> bool:
    alo, ahi = a.world_aabb()
    blo, bhi = b.world_aabb()
    return bool(np.any(ahi < blo) or np.any(bhi < alo))
