"""Star catalog, candidate matching, attitude determination and bracketing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import OpnavError, ParameterError
from .camera import CameraModel, ObserverState, aberrate
from .ephemeris import AU_KM, J2000_TO_REFERENCE_S, YEAR_S
from .numerics import LmaProblem, Rotation, slerp, solve_lma

MAS = math.pi / (180.0 * 3600.0 * 1000.0)
HIPPARCOS_EPOCH_JYEAR = 1991.25


class InsufficientMatchesError(OpnavError):
    """Fewer than two candidate/catalog pairs survived matching."""


def julian_year_to_epoch(jyear: float) -> float:
    """Seconds past the toolkit reference epoch for a Julian-year date."""
    return (jyear - 2000.0) * YEAR_S - J2000_TO_REFERENCE_S


def radec_to_unit(ra, dec) -> np.ndarray:
    ra = np.asarray(ra, dtype=float)
    dec = np.asarray(dec, dtype=float)
    return np.stack([np.cos(dec) * np.cos(ra), np.cos(dec) * np.sin(ra), np.sin(dec)], axis=-1)


def unit_to_radec(e):
    e = np.asarray(e, dtype=float)
    return np.arctan2(e[..., 1], e[..., 0]) % (2 * np.pi), np.arcsin(np.clip(e[..., 2], -1, 1))


def tangent_basis(e0):
    """East (p) and north (q) unit vectors at direction(s) ``e0``."""
    e0 = np.asarray(e0, dtype=float)
    ra, dec = unit_to_radec(e0)
    p = np.stack([-np.sin(ra), np.cos(ra), np.zeros_like(ra)], axis=-1)
    q = np.stack([-np.sin(dec) * np.cos(ra), -np.sin(dec) * np.sin(ra), np.cos(dec)], axis=-1)
    return p, q


@dataclass(frozen=True)
class CatalogStar:
    id: int
    e0: np.ndarray
    mu_a: float  # rad/yr along p
    mu_d: float  # rad/yr along q
    parallax: float  # rad
    mag: float
    t_ep: float  # s past the reference epoch

    def __post_init__(self):
        e0 = np.asarray(self.e0, dtype=float)
        if abs(np.linalg.norm(e0) - 1.0) > 1e-9:
            raise ParameterError("catalog direction must be a unit vector")
        if self.parallax < 0:
            raise ParameterError("parallax must be non-negative")
        object.__setattr__(self, "e0", e0)


def star_direction(s: CatalogStar, t: float, observer_pos) -> np.ndarray:
    """Unit ICRF direction of a catalog star seen from ``observer_pos`` at ``t``."""
    p, q = tangent_basis(s.e0)
    dt_yr = (t - s.t_ep) / YEAR_S
    e = s.e0 + dt_yr * (s.mu_a * p + s.mu_d * q) - s.parallax * np.asarray(observer_pos, dtype=float) / AU_KM
    return e / np.linalg.norm(e)


class StarCatalog:
    """Column-oriented star catalog with vectorized direction propagation."""

    def __init__(self, ids, e0, mu_a, mu_d, parallax, mag, t_ep):
        self.ids = np.asarray(ids, dtype=int)
        self.e0 = np.atleast_2d(np.asarray(e0, dtype=float)).reshape(-1, 3)
        self.mu_a = np.asarray(mu_a, dtype=float)
        self.mu_d = np.asarray(mu_d, dtype=float)
        self.parallax = np.asarray(parallax, dtype=float)
        self.mag = np.asarray(mag, dtype=float)
        self.t_ep = np.broadcast_to(np.asarray(t_ep, dtype=float), self.ids.shape).copy()
        if len({self.ids.size, self.e0.shape[0], self.mag.size}) != 1:
            raise ParameterError("catalog columns have inconsistent lengths")
        if np.any(self.parallax < 0):
            raise ParameterError("parallax must be non-negative")
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return int(self.ids.size)

    def star(self, star_id: int) -> CatalogStar:
        k = self._index[int(star_id)]
        return CatalogStar(int(self.ids[k]), self.e0[k], self.mu_a[k], self.mu_d[k], self.parallax[k],
                           self.mag[k], self.t_ep[k])

    def index_of(self, ids) -> np.ndarray:
        return np.array([self._index[int(i)] for i in np.atleast_1d(ids)], dtype=int)

    def subset(self, mask) -> "StarCatalog":
        return StarCatalog(self.ids[mask], self.e0[mask], self.mu_a[mask], self.mu_d[mask],
                           self.parallax[mask], self.mag[mask], self.t_ep[mask])

    def directions(self, t: float, observer_pos, idx=None) -> np.ndarray:
        sl = slice(None) if idx is None else idx
        e0 = self.e0[sl]
        p, q = tangent_basis(e0)
        dt = ((t - self.t_ep[sl]) / YEAR_S)[:, None]
        e = (e0 + dt * (self.mu_a[sl, None] * p + self.mu_d[sl, None] * q)
             - self.parallax[sl, None] * np.asarray(observer_pos, dtype=float)[None, :] / AU_KM)
        return e / np.linalg.norm(e, axis=1, keepdims=True)

    # -- text format: id ra_deg dec_deg pmra_mas_yr pmdec_mas_yr plx_mas mag epoch_jyear

    @classmethod
    def from_text(cls, text: str) -> "StarCatalog":
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(x) for x in line.split()])
        if not rows:
            return cls.empty()
        a = np.array(rows)
        if a.shape[1] != 8:
            raise ParameterError("catalog rows need 8 columns: id ra dec pmra pmdec plx mag epoch")
        deg = math.pi / 180
        return cls(a[:, 0].astype(int), radec_to_unit(a[:, 1] * deg, a[:, 2] * deg), a[:, 3] * MAS,
                   a[:, 4] * MAS, a[:, 5] * MAS, a[:, 6], [julian_year_to_epoch(y) for y in a[:, 7]])

    def to_text(self) -> str:
        ra, dec = unit_to_radec(self.e0)
        jy = self.t_ep / YEAR_S + 2000.0 + J2000_TO_REFERENCE_S / YEAR_S
        lines = ["# id ra_deg dec_deg pmra_mas_yr pmdec_mas_yr parallax_mas vmag epoch_jyear"]
        for k in range(len(self)):
            lines.append(
                f"{self.ids[k]:d} {math.degrees(ra[k]):.10f} {math.degrees(dec[k]):.10f} "
                f"{self.mu_a[k] / MAS:.4f} {self.mu_d[k] / MAS:.4f} {self.parallax[k] / MAS:.4f} "
                f"{self.mag[k]:.3f} {jy[k]:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path) -> "StarCatalog":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def empty(cls) -> "StarCatalog":
        return cls(np.zeros(0, int), np.zeros((0, 3)), [], [], [], [], [])

    @classmethod
    def bundled(cls) -> "StarCatalog":
        """The packaged bright-star subset (a seeded synthetic sky)."""
        text = resources.files("opnav").joinpath("data/bright_stars.txt").read_text()
        return cls.from_text(text)


def generate_catalog(n: int = 2500, seed: int = 1991, mag_range=(-1.0, 6.5),
                     center=None, radius_deg: Optional[float] = None, first_id: int = 1) -> StarCatalog:
    """Seeded synthetic star catalog.

    Directions are uniform on the sphere (or on a cap of ``radius_deg`` about
    ``center``); magnitudes follow a ``log10 N(<m) = 0.5 m`` count law
    truncated to ``mag_range``; proper motions and parallaxes have plausible
    bright-star scatter.  Quantities are rounded to the text-format precision
    so that a save/load round trip is exact.
    """
    rng = np.random.default_rng(seed)
    if center is None:
        z = rng.uniform(-1, 1, n)
    else:
        cmin = math.cos(math.radians(radius_deg))
        z = rng.uniform(cmin, 1, n)
    phi = rng.uniform(0, 2 * np.pi, n)
    e = np.column_stack([np.sqrt(1 - z**2) * np.cos(phi), np.sqrt(1 - z**2) * np.sin(phi), z])
    if center is not None:
        c = np.asarray(center, dtype=float)
        R = Rotation.align_boresight(c).as_matrix()
        e = e @ R  # cap about +z rotated onto ``center``
    lo, hi = mag_range
    a = 10 ** (0.5 * lo)
    b = 10 ** (0.5 * hi)
    mag = 2.0 * np.log10(rng.uniform(a, b, n))
    ra, dec = unit_to_radec(e)
    ra_deg = np.round(np.degrees(ra), 10)
    dec_deg = np.round(np.degrees(dec), 10)
    pm = np.round(rng.normal(0.0, 40.0, (n, 2)), 4)
    plx = np.round(np.abs(rng.lognormal(np.log(10.0), 0.8, n)), 4)
    mag = np.round(mag, 3)
    deg = math.pi / 180
    return StarCatalog(np.arange(first_id, first_id + n), radec_to_unit(ra_deg * deg, dec_deg * deg),
                       pm[:, 0] * MAS, pm[:, 1] * MAS, plx * MAS, mag,
                       julian_year_to_epoch(HIPPARCOS_EPOCH_JYEAR))


# ---------------------------------------------------------------------------
# prediction and matching
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    ids: np.ndarray
    uv: np.ndarray
    directions: np.ndarray  # geometric ICRF directions (before aberration)
    mag: np.ndarray


def predict_stars(catalog: StarCatalog, camera: CameraModel, attitude: Rotation, t: float,
                  observer_pos, observer_vel, mag_limit: Optional[float] = 6.0,
                  margin: float = 0.0) -> Prediction:
    """Project catalog stars brighter than ``mag_limit`` into the image.

    Aberration is applied before projection, so predictions are directly
    comparable with measured centroids.
    """
    if len(catalog) == 0:
        return Prediction(np.zeros(0, int), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0))
    sel = np.ones(len(catalog), bool) if mag_limit is None else catalog.mag <= mag_limit
    bore = attitude.as_matrix()[2]
    half_diag = math.hypot(camera.cols, camera.rows) / camera.dx
    cone = math.cos(min(math.atan(half_diag) * 1.2 + 0.02, math.pi / 2))
    sel &= catalog.e0 @ bore > cone
    idx = np.nonzero(sel)[0]
    if idx.size == 0:
        return Prediction(np.zeros(0, int), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0))
    e = catalog.directions(t, observer_pos, idx)
    uv, ok = camera.project(e, ObserverState(observer_vel, attitude))
    ok &= camera.in_bounds(np.nan_to_num(uv, nan=-1e9), margin=margin)
    return Prediction(catalog.ids[idx[ok]], uv[ok], e[ok], catalog.mag[idx[ok]])


@dataclass
class StarMatchSet:
    measured: np.ndarray  # (n, 2)
    ids: np.ndarray
    residuals: np.ndarray  # measured - predicted, (n, 2)
    predicted: np.ndarray
    median_residual: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __len__(self) -> int:
        return int(self.ids.size)


def match_stars(candidates, predicted_uv, predicted_ids, gate: float = 10.0, ratio: float = 0.8,
                median_tol: float = 3.0, cone_deg: float = 20.0) -> StarMatchSet:
    """Pair measured centroids with predicted catalog projections.

    1. proximity gate on the nearest prediction,
    2. nearest/second-nearest distance ratio test,
    3. consistency with the median residual vector (distance tolerance, plus a
       direction cone once the median offset exceeds the tolerance),
    4. duplicate claims on one catalog star go to the pair closest to the median.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=float)).reshape(-1, 2)
    pred = np.atleast_2d(np.asarray(predicted_uv, dtype=float)).reshape(-1, 2)
    pid = np.asarray(predicted_ids)
    if cand.shape[0] == 0 or pred.shape[0] == 0:
        raise InsufficientMatchesError("no candidates or no predicted stars to match")
    tree = cKDTree(pred)
    k = 2 if pred.shape[0] > 1 else 1
    d, j = tree.query(cand, k=k)
    if k == 1:
        d = np.column_stack([d, np.full(d.shape, np.inf)])
        j = np.column_stack([j, np.zeros_like(j)])
    keep = d[:, 0] <= gate
    with np.errstate(divide="ignore", invalid="ignore"):
        keep &= (d[:, 0] < ratio * d[:, 1]) | ~np.isfinite(d[:, 1])
    ci = np.nonzero(keep)[0]
    pj = j[ci, 0]
    if ci.size < 2:
        raise InsufficientMatchesError(f"only {ci.size} candidates passed the gate and ratio tests")
    res = cand[ci] - pred[pj]
    med = np.median(res, axis=0)
    dev = np.linalg.norm(res - med, axis=1)
    ok = dev <= median_tol
    mnorm = np.linalg.norm(med)
    if mnorm > median_tol:
        cosang = (res @ med) / (np.linalg.norm(res, axis=1) * mnorm + 1e-300)
        ok &= cosang >= math.cos(math.radians(cone_deg))
    ci, pj, res, dev = ci[ok], pj[ok], res[ok], dev[ok]
    best = {}
    for a, (c, p) in enumerate(zip(ci, pj)):
        if p not in best or dev[a] < dev[best[p]]:
            best[p] = a
    order = sorted(best.values(), key=lambda a: ci[a])
    if len(order) < 2:
        raise InsufficientMatchesError(f"only {len(order)} matches survived the median-residual filter")
    sel = np.array(order, dtype=int)
    return StarMatchSet(cand[ci[sel]], pid[pj[sel]], res[sel], pred[pj[sel]], med)


# ---------------------------------------------------------------------------
# attitude
# ---------------------------------------------------------------------------


@dataclass
class AttitudeSolution:
    attitude: Rotation
    n_stars: int
    rms_px: float
    epoch: float
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    residuals: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    prefit_rms_px: float = float("nan")
    minimal: bool = False
    warning: str = ""

    def to_dict(self) -> dict:
        return {
            "epoch_s": self.epoch, "quaternion_xyzw": self.attitude.as_quat().tolist(),
            "n_stars": self.n_stars, "rms_px": self.rms_px, "prefit_rms_px": self.prefit_rms_px,
            "star_ids": [int(i) for i in self.ids], "minimal_geometry": self.minimal,
            "warning": self.warning,
        }


def davenport_q(body, ref, weights=None) -> Rotation:
    """Attitude ``T`` maximizing ``sum w b.(T r)`` (Wahba) via the q-method."""
    b = np.atleast_2d(body)
    r = np.atleast_2d(ref)
    w = np.ones(b.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    B = (w[:, None, None] * b[:, :, None] * r[:, None, :]).sum(axis=0)
    S = B + B.T
    sigma = np.trace(B)
    z = np.array([B[1, 2] - B[2, 1], B[2, 0] - B[0, 2], B[0, 1] - B[1, 0]])
    K = np.zeros((4, 4))
    K[:3, :3] = S - sigma * np.eye(3)
    K[:3, 3] = z
    K[3, :3] = z
    K[3, 3] = sigma
    vals, vecs = np.linalg.eigh(K)
    return Rotation(vecs[:, int(np.argmax(vals))])


def reprojection_residuals(attitude: Rotation, camera: CameraModel, e_app, uv) -> np.ndarray:
    pred, ok = camera.project_camera(attitude.apply(e_app))
    if not np.all(ok):
        return np.full(uv.shape, 1e6)
    return pred - uv


def solve_attitude(matches: StarMatchSet, directions, camera: CameraModel, epoch: float,
                   observer_vel, prior: Optional[Rotation] = None) -> AttitudeSolution:
    """Camera attitude from matched stars.

    ``directions`` are the geometric ICRF star directions for
    ``matches.ids`` (same order); aberration by ``observer_vel`` is applied
    here.  A q-method solution seeds an LMA polish of the pixel residuals.
    """
    uv = np.asarray(matches.measured, dtype=float)
    n = uv.shape[0]
    if n < 2:
        raise InsufficientMatchesError("attitude needs at least two matched stars")
    e_app = aberrate(np.asarray(directions, dtype=float), observer_vel)
    b = camera.unproject(uv[:, 0], uv[:, 1])
    spread = max(float(np.arccos(np.clip(e_app[i] @ e_app[j], -1, 1)))
                 for i in range(n) for j in range(i + 1, n))
    if spread < 1e-9:
        raise ParameterError("matched stars are coincident; attitude undetermined")
    q0 = davenport_q(b, e_app)
    pre_att = prior if prior is not None else q0
    pre = reprojection_residuals(pre_att, camera, e_app, uv)
    prefit = float(np.sqrt(np.mean(np.sum(pre**2, axis=1))))

    def residual(x):
        return reprojection_residuals(Rotation.from_rotvec(x) @ q0, camera, e_app, uv).ravel()

    res = solve_lma(LmaProblem(residual, xtol=1e-14, ftol=1e-20, max_iter=50), np.zeros(3))
    att = Rotation.from_rotvec(res.x) @ q0
    r = reprojection_residuals(att, camera, e_app, uv)
    rms = float(np.sqrt(np.mean(np.sum(r**2, axis=1))))
    warning = ""
    if spread < math.radians(0.1):
        warning = "poorly conditioned: all stars within 0.1 deg"
    minimal = n == 2
    if minimal:
        warning = (warning + "; " if warning else "") + "minimal geometry: two stars"
    return AttitudeSolution(att, n, rms, epoch, np.asarray(matches.ids), r, prefit, minimal, warning)


def bracket_attitude(before: AttitudeSolution, after: AttitudeSolution, t_mid: float) -> Rotation:
    """SLERP between two star-image attitudes at the intermediate epoch."""
    t0, t1 = before.epoch, after.epoch
    if t1 < t0:
        raise ParameterError("bracketing epochs are reversed")
    if not (t0 <= t_mid <= t1):
        raise ParameterError(f"epoch {t_mid} outside bracket [{t0}, {t1}]")
    if t1 == t0:
        return before.attitude
    return slerp(before.attitude, after.attitude, (t_mid - t0) / (t1 - t0))


def attitude_from_image(blobs_uv, catalog: StarCatalog, camera: CameraModel, commanded: Rotation,
                        t: float, observer_pos, observer_vel, mag_limit: float = 6.0,
                        **match_kw) -> AttitudeSolution:
    """Match detected centroids against the catalog reprojected with the
    commanded attitude, then solve for the attitude."""
    pred = predict_stars(catalog, camera, commanded, t, observer_pos, observer_vel, mag_limit, margin=-5.0)
    matches = match_stars(blobs_uv, pred.uv, pred.ids, **match_kw)
    k = {int(i): a for a, i in enumerate(pred.ids)}
    dirs = pred.directions[[k[int(i)] for i in matches.ids]]
    return solve_attitude(matches, dirs, camera, t, observer_vel, prior=commanded)
