"""Joint estimation of camera intrinsics and per-image attitude corrections
from star observations spread over several images."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ParameterError
from .camera import DEFAULT_IFOV_ARCSEC, CameraModel, aberrate
from .numerics import LmaProblem, Rotation, solve_lma

INTRINSICS = ("dx", "k1", "p1", "p2")


@dataclass
class CalibrationImage:
    """Matched stars of one image.

    ``directions`` are geometric ICRF star directions matching the rows of
    ``measured`` (pixel ``(u, v)``); ``velocity`` is the observer velocity
    used for aberration.
    """

    image_id: str
    measured: np.ndarray
    directions: np.ndarray
    attitude: Rotation
    epoch: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    star_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.measured = np.atleast_2d(np.asarray(self.measured, dtype=float))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        if self.measured.shape[0] != self.directions.shape[0]:
            raise ParameterError(f"image {self.image_id}: measured/direction counts differ")
        if self.star_ids is None:
            self.star_ids = np.arange(self.measured.shape[0])


@dataclass
class CalibrationProblem:
    images: List[CalibrationImage]
    free: Tuple[str, ...] = INTRINSICS

    def __post_init__(self):
        bad = [p for p in self.free if p not in INTRINSICS]
        if bad:
            raise ParameterError(f"unknown calibration parameters {bad}; choose from {INTRINSICS}")
        if len(self.images) < 2:
            raise ParameterError("calibration needs at least two images")
        few = [im.image_id for im in self.images if im.measured.shape[0] < 3]
        if few:
            raise ParameterError(f"images with fewer than three stars: {few}")
        total = sum(im.measured.shape[0] for im in self.images)
        if total < 20:
            raise ParameterError(f"calibration needs at least 20 matched stars, got {total}")


@dataclass
class ResidualStats:
    mean: float
    rms: float
    max: float
    radius_bins: np.ndarray  # bin edges, px
    radius_mean: np.ndarray  # mean residual norm per bin (nan if empty)

    def to_dict(self) -> dict:
        return {"mean_px": self.mean, "rms_px": self.rms, "max_px": self.max,
                "radius_bins_px": self.radius_bins.tolist(),
                "radius_mean_px": [None if not np.isfinite(x) else float(x) for x in self.radius_mean]}


@dataclass
class CalibrationResult:
    camera: CameraModel
    corrections: List[Rotation]
    pre: ResidualStats
    post: ResidualStats
    covariance: np.ndarray
    parameter_names: List[str]
    rank_deficient: bool
    diagnostic: str
    iterations: int
    pre_residuals: np.ndarray  # (n, 2) stacked over images
    post_residuals: np.ndarray
    radius: np.ndarray  # (n,) px from the principal point
    star_ids: np.ndarray
    image_index: np.ndarray
    measured: np.ndarray

    def attitudes(self, problem: CalibrationProblem) -> List[Rotation]:
        return [c @ im.attitude for c, im in zip(self.corrections, problem.images)]

    def sigma(self, name: str) -> float:
        """One-sigma uncertainty of a named parameter (physical units)."""
        k = self.parameter_names.index(name)
        return float(math.sqrt(max(self.covariance[k, k], 0.0)))

    def to_dict(self) -> dict:
        return {"camera": self.camera.to_dict(), "pre": self.pre.to_dict(), "post": self.post.to_dict(),
                "corrections_rotvec_rad": [c.as_rotvec().tolist() for c in self.corrections],
                "rank_deficient": self.rank_deficient, "diagnostic": self.diagnostic,
                "iterations": self.iterations}


def residual_stats(res: np.ndarray, radius: np.ndarray, edges: np.ndarray) -> ResidualStats:
    norm = np.linalg.norm(res, axis=1)
    idx = np.digitize(radius, edges) - 1
    prof = np.array([norm[idx == k].mean() if np.any(idx == k) else np.nan for k in range(len(edges) - 1)])
    return ResidualStats(float(norm.mean()), float(np.sqrt(np.mean(norm**2))), float(norm.max()), edges, prof)


class _Layout:
    """Maps the solver vector to camera parameters and attitude corrections.

    ``dx`` is carried as a ratio to its initial value and each attitude
    correction as a rotation vector multiplied by the initial focal length,
    so that all entries move pixels at comparable rates.
    """

    def __init__(self, camera: CameraModel, free: Sequence[str], n_images: int):
        self.base = camera
        self.free = tuple(p for p in INTRINSICS if p in free)
        self.n_images = n_images
        self.scale = camera.dx

    @property
    def size(self) -> int:
        return len(self.free) + 3 * self.n_images

    def x0(self) -> np.ndarray:
        x = np.zeros(self.size)
        for k, p in enumerate(self.free):
            x[k] = 1.0 if p == "dx" else getattr(self.base, p)
        return x

    def camera(self, x) -> CameraModel:
        kw = {}
        for k, p in enumerate(self.free):
            if p == "dx":
                kw["dx"] = kw["dy"] = x[k] * self.base.dx
            else:
                kw[p] = x[k]
        return self.base.replace(**kw)

    def corrections(self, x) -> List[Rotation]:
        off = len(self.free)
        return [Rotation.from_rotvec(x[off + 3 * i: off + 3 * i + 3] / self.scale) for i in range(self.n_images)]

    def names(self) -> List[str]:
        out = list(self.free)
        for i in range(self.n_images):
            out += [f"att{i}_x", f"att{i}_y", f"att{i}_z"]
        return out


def _project_all(camera: CameraModel, attitudes, e_app) -> np.ndarray:
    out = []
    for att, e in zip(attitudes, e_app):
        uv, ok = camera.project_camera(att.apply(e))
        if not np.all(ok):
            uv = np.where(ok[:, None], uv, 1e6)
        out.append(uv)
    return np.vstack(out)


def calibrate(problem: CalibrationProblem, camera: Optional[CameraModel] = None,
              max_iter: int = 60, radius_bins: int = 8) -> CalibrationResult:
    """Minimize measured-minus-projected pixel residuals over the free
    intrinsics and one small rotation per image.

    Square pixels and a fixed principal point are enforced (``dy = dx``,
    ``k2 = k3 = 0`` unless supplied nonzero in ``camera``).
    """
    if camera is None:
        camera = CameraModel.default(DEFAULT_IFOV_ARCSEC)
    camera = camera.replace(dy=camera.dx)
    ims = problem.images
    e_app = [aberrate(im.directions, im.velocity) for im in ims]
    meas = np.vstack([im.measured for im in ims])
    lay = _Layout(camera, problem.free, len(ims))

    def residual(x):
        cam = lay.camera(x)
        atts = [c @ im.attitude for c, im in zip(lay.corrections(x), ims)]
        return (meas - _project_all(cam, atts, e_app)).ravel()

    x0 = lay.x0()
    r0 = residual(x0).reshape(-1, 2)
    fit = solve_lma(LmaProblem(residual, xtol=1e-13, ftol=1e-16, max_iter=max_iter), x0)
    cam = lay.camera(fit.x)
    r1 = fit.residual.reshape(-1, 2)

    # covariance in physical units (dx in px, rotations in rad)
    J = fit.jacobian.copy()
    phys = np.ones(lay.size)
    for k, p in enumerate(lay.free):
        if p == "dx":
            phys[k] = camera.dx
    phys[len(lay.free):] = 1.0 / lay.scale  # x = theta * scale
    Jp = J / phys[None, :]
    s = np.linalg.svd(Jp / np.linalg.norm(Jp, axis=0, keepdims=True).clip(1e-300), compute_uv=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    dof = max(meas.size - lay.size, 1)
    sigma2 = float(r1.ravel() @ r1.ravel()) / dof
    names = lay.names()
    rank_def = not np.isfinite(cond) or cond > 1e8
    diag = f"scaled Jacobian condition {cond:.3g}"
    try:
        cov = np.linalg.pinv(Jp.T @ Jp) * max(sigma2, 1e-30)
    except np.linalg.LinAlgError:
        cov = np.full((lay.size, lay.size), np.nan)
        rank_def = True
    # a parameter is unobservable when its 1-sigma uncertainty moves the
    # sensor corner by more than a pixel
    rc_px = math.hypot(max(camera.up, camera.cols - 1 - camera.up), max(camera.vp, camera.rows - 1 - camera.vp))
    rc = rc_px / camera.dx
    corner = {"dx": rc_px / camera.dx, "k1": rc**3 * camera.dx, "p1": 3 * rc**2 * camera.dx,
              "p2": 3 * rc**2 * camera.dx}
    weak = []
    for k, p in enumerate(lay.free):
        shift = math.sqrt(max(cov[k, k], 0.0)) * corner[p]
        if not np.isfinite(shift) or shift > 1.0:
            weak.append(f"{p} (1-sigma corner shift {shift:.3g} px)")
    if weak:
        rank_def = True
        diag += "; weakly observable: " + ", ".join(weak)
    elif rank_def:
        _, _, vt = np.linalg.svd(Jp / np.linalg.norm(Jp, axis=0, keepdims=True).clip(1e-300))
        worst = np.argsort(-np.abs(vt[-1]))[:3]
        diag += "; near-null direction: " + ", ".join(f"{names[i]} ({vt[-1][i]:+.2f})" for i in worst)

    radius = np.hypot(meas[:, 0] - camera.up, meas[:, 1] - camera.vp)
    rmax = math.hypot(max(camera.up, camera.cols - 1 - camera.up), max(camera.vp, camera.rows - 1 - camera.vp))
    edges = np.linspace(0.0, rmax + 1e-9, radius_bins + 1)
    ids = np.concatenate([im.star_ids for im in ims])
    img_idx = np.concatenate([np.full(im.measured.shape[0], i) for i, im in enumerate(ims)])
    return CalibrationResult(cam, lay.corrections(fit.x), residual_stats(r0, radius, edges),
                             residual_stats(r1, radius, edges), cov, names, rank_def, diag,
                             fit.iterations, r0, r1, radius, ids, img_idx, meas)


def radial_correlation(result: CalibrationResult) -> float:
    """Pearson correlation between the radial component of the post-fit
    residuals and distance from the principal point."""
    cam = result.camera
    off = result.measured - np.array([cam.up, cam.vp])
    rad = np.linalg.norm(off, axis=1)
    keep = rad > 1.0
    radial = np.sum(result.post_residuals[keep] * off[keep], axis=1) / rad[keep]
    if np.std(radial) == 0.0:
        return 0.0
    return float(np.corrcoef(radial, rad[keep])[0, 1])
