"""PCA shape model and box-constrained structure fitting under perspective.

A shape ``X = M + sum_i alpha_i P_i`` is posed by ``T_j`` (camera orbit
rotation plus distance), projected with a unit-focal pinhole to ``p`` and
mapped to the image by a per-axis scale ``s`` and shift ``beta``. For each pose
sample, Gauss-Newton minimizes the squared error to the visible 2D targets
with ``|alpha_i| <= 2.7 sigma_i``. All pose samples run as one batch; every
operation acts slice by slice, so a pose's result does not depend on which
other poses share the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .synthgen.camera import look_at_rotation

log = logging.getLogger(__name__)

BOX = 2.7


class FitError(ValueError):
    pass


@dataclass
class PCAShapeModel:
    mean: np.ndarray
    components: np.ndarray
    sigmas: np.ndarray
    requested: int = 0

    @property
    def n_components(self) -> int:
        return len(self.sigmas)

    @property
    def n_keypoints(self) -> int:
        return self.mean.shape[1]

    @property
    def bounds(self) -> np.ndarray:
        return BOX * self.sigmas

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, components=self.components, sigmas=self.sigmas)

    @classmethod
    def load(cls, path) -> "PCAShapeModel":
        with np.load(path) as z:
            return cls(z["mean"], z["components"], z["sigmas"], len(z["sigmas"]))


def fit_pca(shapes: np.ndarray, n_components: int = 5, tol: float = 1e-10) -> PCAShapeModel:
    """Mean shape and leading principal components of ``(S, 3, N)`` skeletons.

    ``sigmas`` are the sample standard deviations (ddof 1) of the training
    projections. Components whose sigma is below ``tol`` relative to the data
    scale are dropped with a warning.
    """
    X = np.asarray(shapes, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != 3:
        raise ValueError(f"shapes must be (S, 3, N), got {X.shape}")
    S = len(X)
    if S < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} shapes for {n_components} components, got {S}")
    flat = X.reshape(S, -1)
    mean = flat.mean(axis=0)
    _, sv, vt = np.linalg.svd(flat - mean, full_matrices=False)
    sig = sv / np.sqrt(S - 1)
    scale = max(float(np.abs(flat).max()), 1.0)
    keep = min(n_components, int(np.count_nonzero(sig > tol * scale)))
    if keep < n_components:
        log.warning("shape data has rank %d < %d requested components; truncating", keep, n_components)
    comps = vt[:keep].copy()
    # deterministic sign: largest-magnitude entry positive
    flip = np.sign(comps[np.arange(keep), np.argmax(np.abs(comps), axis=1)])
    comps *= flip[:, None]
    return PCAShapeModel(mean.reshape(3, -1), comps.reshape(keep, 3, -1), sig[:keep], n_components)


def reconstruct(model: PCAShapeModel, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (model.n_components,):
        raise ValueError(f"expected {model.n_components} coefficients, got shape {alpha.shape}")
    return model.mean + np.tensordot(alpha, model.components, axes=1)


def project_onto(model: PCAShapeModel, shape: np.ndarray) -> np.ndarray:
    d = (np.asarray(shape, dtype=np.float64) - model.mean).ravel()
    return model.components.reshape(model.n_components, -1) @ d


@dataclass(frozen=True)
class Pose:
    """Camera orbit around the object: azimuth/elevation in degrees, distance in object units."""

    azimuth: float
    elevation: float
    distance: float

    @property
    def rotation(self) -> np.ndarray:
        return look_at_rotation(self.azimuth, self.elevation)


def pose_grid(seed: Pose, az_half: float = 10, el_half: float = 5, step: float = 1) -> list[Pose]:
    """Uniform grid around ``seed``: azimuth +-az_half, elevation +-el_half."""
    az = np.arange(-az_half, az_half + step / 2, step)
    el = np.arange(-el_half, el_half + step / 2, step)
    return [Pose(seed.azimuth + a, seed.elevation + e, seed.distance) for a in az for e in el]


def project_pose(X: np.ndarray, pose: Pose) -> np.ndarray:
    """Unit-focal perspective projection ``(2, N)`` of object points ``(3, N)``."""
    Xc = pose.rotation @ X
    Xc[2] += pose.distance
    if np.any(Xc[2] <= 0):
        raise FitError("point behind the camera")
    return Xc[:2] / Xc[2]


@dataclass
class FitResult:
    alpha: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    pose: Pose
    pose_index: int
    residual: float
    iterations: int
    all_residuals: np.ndarray = field(repr=False, default=None)


def _affine(p: np.ndarray, Y: np.ndarray):
    """Per-axis least squares ``Y ~ s * p + beta`` for a batch ``p (B, 2, V)``."""
    pm = p.mean(axis=2, keepdims=True)
    ym = Y.mean(axis=1, keepdims=True)[None]
    dp = p - pm
    var = np.sum(dp * dp, axis=2)
    cov = np.sum(dp * (Y[None] - ym), axis=2)
    s = np.where(var > 0, cov / np.where(var > 0, var, 1.0), 0.0)
    beta = ym[..., 0] - s * pm[..., 0]
    return s, beta


class _Batch:
    """Per-pose geometry for the visible keypoints."""

    def __init__(self, model: PCAShapeModel, vis: np.ndarray, poses: Sequence[Pose]):
        self.M = model.mean[:, vis]
        self.P = model.components[:, :, vis]
        self.R = np.stack([p.rotation for p in poses])
        self.d = np.array([p.distance for p in poses], dtype=np.float64)
        # R @ M and R @ P_i precomputed per pose
        self.RM = np.einsum("bij,jv->biv", self.R, self.M)
        self.RP = np.einsum("bij,njv->bniv", self.R, self.P)

    def camera_points(self, alpha: np.ndarray) -> np.ndarray:
        Xc = self.RM + np.einsum("bn,bniv->biv", alpha, self.RP)
        Xc[:, 2] += self.d[:, None]
        return Xc

    def residuals(self, alpha: np.ndarray, Y: np.ndarray):
        Xc = self.camera_points(alpha)
        z = Xc[:, 2]
        if np.any(z <= 0):
            z = np.where(z > 0, z, np.nan)
        p = Xc[:, :2] / z[:, None]
        s, beta = _affine(p, Y)
        r = s[:, :, None] * p + beta[:, :, None] - Y[None]
        return r, p, Xc, s, beta


def _cost(r: np.ndarray) -> np.ndarray:
    c = np.sum(r * r, axis=(1, 2))
    return np.where(np.isfinite(c), c, np.inf)


def fit_structure(Y: np.ndarray, visible: np.ndarray, model: PCAShapeModel, poses: Sequence[Pose],
                  max_iter: int = 50, step_tol: float = 1e-8, min_visible: int = 6) -> FitResult:
    """Best pose sample and box-constrained coefficients for 2D targets ``Y (N, 2)``."""
    Y = np.asarray(Y, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool)
    if Y.shape != (model.n_keypoints, 2) or vis.shape != (model.n_keypoints,):
        raise FitError(f"targets must be ({model.n_keypoints}, 2) with a matching visibility mask")
    V = int(vis.sum())
    if V < min_visible:
        raise FitError(f"{V} visible keypoints; at least {min_visible} are needed")
    if not poses:
        raise FitError("no pose samples given")
    Yv = Y[vis].T
    batch = _Batch(model, vis, poses)
    B, n = len(poses), model.n_components
    bound = model.bounds
    alpha = np.zeros((B, n))
    r, p, Xc, s, beta = batch.residuals(alpha, Yv)
    cost = _cost(r)
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=np.int64)
    eye = np.eye(n + 4)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        z = Xc[idx, 2][:, None, None]
        dXc = batch.RP[idx]
        dp = (dXc[:, :, :2] - Xc[idx, None, :2] * dXc[:, :, 2:3] / z) / z
        Ja = (s[idx][:, None, :, None] * dp).reshape(len(idx), n, 2 * V).transpose(0, 2, 1)
        Js = np.zeros((len(idx), 2 * V, 4))
        Js[:, :V, 0] = p[idx, 0]
        Js[:, V:, 1] = p[idx, 1]
        Js[:, :V, 2] = 1.0
        Js[:, V:, 3] = 1.0
        J = np.concatenate([Ja, Js], axis=2)
        rf = r[idx].reshape(len(idx), 2 * V)
        a = alpha[idx]
        at_lo = a <= -bound
        at_hi = a >= bound
        fixed = np.zeros((len(idx), n + 4), dtype=bool)
        delta = np.zeros((len(idx), n + 4))
        for _pass in range(2):
            Jm = np.where(fixed[:, None, :], 0.0, J)
            A = np.einsum("bki,bkj->bij", Jm, Jm) + eye * fixed[:, None, :] + 1e-12 * eye
            g = np.einsum("bki,bk->bi", Jm, rf)
            delta = -np.linalg.solve(A, g[..., None])[..., 0]
            push_out = (at_lo & (delta[:, :n] < 0)) | (at_hi & (delta[:, :n] > 0))
            new_fixed = fixed.copy()
            new_fixed[:, :n] |= push_out
            if np.array_equal(new_fixed, fixed):
                break
            fixed = new_fixed
        t = np.ones(len(idx))
        done = np.zeros(len(idx), dtype=bool)
        best_a = a.copy()
        for _h in range(30):
            cand = np.clip(a + t[:, None] * delta[:, :n], -bound, bound)
            cand = np.where(done[:, None], best_a, cand)
            batch_sub = _Sub(batch, idx)
            rc, pc, Xcc, sc, bc = batch_sub.residuals(cand, Yv)
            cc = _cost(rc)
            ok = (cc <= cost[idx]) & ~done
            for k in np.flatnonzero(ok):
                b = idx[k]
                alpha[b], r[b], p[b], Xc[b], s[b], beta[b], cost[b] = cand[k], rc[k], pc[k], Xcc[k], sc[k], bc[k], cc[k]
            done |= ok
            if done.all():
                break
            t = np.where(done, t, t / 2)
        moved = np.linalg.norm(alpha[idx] - a, axis=1)
        iters[idx] += 1
        stop = (moved < step_tol) | ~done
        active[idx[stop]] = False
    rms = np.sqrt(np.sum(r * r, axis=1)).mean(axis=1)
    rms = np.where(np.isfinite(rms), rms, np.inf)
    if not np.isfinite(rms).any():
        raise FitError("every pose sample produced a non-finite residual")
    j = int(np.argmin(rms))
    return FitResult(alpha[j].copy(), s[j].copy(), beta[j].copy(), poses[j], j, float(rms[j]), int(iters[j]), rms)


class _Sub:
    """View of a batch restricted to the pose indices in ``idx``."""

    def __init__(self, batch: _Batch, idx: np.ndarray):
        self.RM = batch.RM[idx]
        self.RP = batch.RP[idx]
        self.d = batch.d[idx]

    camera_points = _Batch.camera_points
    residuals = _Batch.residuals
