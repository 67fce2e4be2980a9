"""Pinhole camera with Brown-Conrady distortion and stellar aberration.

Pixel convention: (0, 0) is the center of the top-left pixel, ``u`` grows to
the right along columns and ``v`` grows down along rows.  The camera frame has
+Z along the boresight, +X toward increasing ``u`` and +Y toward increasing
``v``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import ConvergenceError, ParameterError
from .ephemeris import C_KM_S
from .numerics import Rotation

ARCSEC = math.pi / (180.0 * 3600.0)
DEFAULT_IFOV_ARCSEC = 36.6
DEFAULT_ROWS = 1024
DEFAULT_COLS = 1280


def d_x_from_ifov(ifov_arcsec: float) -> float:
    """Focal length in pixels for a given instantaneous field of view."""
    if not ifov_arcsec > 0:
        raise ParameterError(f"IFOV must be positive, got {ifov_arcsec}")
    return 1.0 / math.tan(ifov_arcsec * ARCSEC)


def aberrate(e, v_obs) -> np.ndarray:
    """Apparent direction of a source seen from an observer moving at ``v_obs`` km/s.

    First-order stellar aberration ``e' = e + beta - (e . beta) e``, then
    renormalized.  Accepts a single direction or an (n, 3) array.
    """
    e = np.asarray(e, dtype=float)
    beta = np.asarray(v_obs, dtype=float) / C_KM_S
    dot = (e @ beta)[..., None]
    out = e + beta - dot * e
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def deaberrate(e_app, v_obs, tol: float = 1e-15, max_iter: int = 20) -> np.ndarray:
    """Exact inverse of :func:`aberrate`.

    Uses ``e (1 - e.beta) = N e' - beta`` with ``N`` the pre-normalization
    length, iterated from ``e = e'``; converges in a few steps since
    ``|beta|`` is tiny.
    """
    e_app = np.asarray(e_app, dtype=float)
    beta = np.asarray(v_obs, dtype=float) / C_KM_S
    e = e_app.copy()
    for _ in range(max_iter):
        dot = (e @ beta)[..., None]
        n = np.linalg.norm(e + beta - dot * e, axis=-1, keepdims=True)
        new = n * e_app - beta
        new = new / np.linalg.norm(new, axis=-1, keepdims=True)
        if np.max(np.abs(new - e)) < tol:
            return new
        e = new
    return e


@dataclass(frozen=True)
class ObserverState:
    velocity: np.ndarray
    attitude: Rotation

    def __post_init__(self):
        v = np.asarray(self.velocity, dtype=float).reshape(3)
        if np.linalg.norm(v) >= C_KM_S:
            raise ParameterError("observer speed must be below c")
        object.__setattr__(self, "velocity", v)


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics, Brown-Conrady coefficients and sensor size."""

    dx: float
    dy: float
    up: float
    vp: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    rows: int = DEFAULT_ROWS
    cols: int = DEFAULT_COLS

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ParameterError("dx and dy must be positive")
        if not (0 <= self.up < self.cols and 0 <= self.vp < self.rows):
            raise ParameterError("principal point must lie on the sensor")

    @classmethod
    def default(cls, ifov_arcsec: float = DEFAULT_IFOV_ARCSEC, rows: int = DEFAULT_ROWS,
                cols: int = DEFAULT_COLS, **distortion) -> "CameraModel":
        """Square pixels, principal point at the geometric sensor center."""
        d = d_x_from_ifov(ifov_arcsec)
        return cls(d, d, (cols - 1) / 2.0, (rows - 1) / 2.0, rows=rows, cols=cols, **distortion)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.dx, 0.0, self.up], [0.0, self.dy, self.vp], [0.0, 0.0, 1.0]])

    @property
    def ifov(self) -> float:
        """Approximate angular size of a pixel, rad."""
        return 1.0 / self.dx

    @property
    def has_distortion(self) -> bool:
        return any((self.k1, self.k2, self.k3, self.p1, self.p2))

    def replace(self, **changes) -> "CameraModel":
        return replace(self, **changes)

    # -- image-plane maps ------------------------------------------------

    def distort(self, x, y):
        """Ideal image-plane coordinates to distorted ones."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r2 = x * x + y * y
        radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
        xd = radial * x + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = radial * y + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return xd, yd

    def undistort(self, xd, yd, tol: float = 1e-12, max_iter: int = 25):
        """Invert :meth:`distort` by fixed-point iteration."""
        xd = np.asarray(xd, dtype=float)
        yd = np.asarray(yd, dtype=float)
        if not self.has_distortion:
            return xd.copy(), yd.copy()
        x, y = xd.copy(), yd.copy()
        for _ in range(max_iter):
            r2 = x * x + y * y
            radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
            dx_ = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
            dy_ = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
            xn = (xd - dx_) / radial
            yn = (yd - dy_) / radial
            change = max(np.max(np.abs(xn - x)), np.max(np.abs(yn - y)))
            x, y = xn, yn
            if change < tol:
                return x, y
        raise ConvergenceError(f"distortion inversion did not converge in {max_iter} iterations")

    def pixel_to_distorted(self, u, v):
        return (np.asarray(u, dtype=float) - self.up) / self.dx, (np.asarray(v, dtype=float) - self.vp) / self.dy

    def distorted_to_pixel(self, xd, yd):
        return self.dx * xd + self.up, self.dy * yd + self.vp

    def image_plane(self, u, v):
        """Undistorted image-plane coordinates ``(x, y)`` of pixel ``(u, v)``."""
        return self.undistort(*self.pixel_to_distorted(u, v))

    # -- projection ------------------------------------------------------

    def project_camera(self, a):
        """Project camera-frame direction(s) to pixels.

        Returns ``(uv, valid)`` where ``valid`` is False for directions with
        ``z <= 0`` (behind the camera); their pixel entries are NaN.
        """
        a = np.asarray(a, dtype=float)
        single = a.ndim == 1
        a = np.atleast_2d(a)
        z = a[:, 2]
        valid = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.where(valid, a[:, 0] / z, np.nan)
            y = np.where(valid, a[:, 1] / z, np.nan)
        xd, yd = self.distort(x, y)
        u, v = self.distorted_to_pixel(xd, yd)
        uv = np.column_stack([u, v])
        if single:
            return uv[0], bool(valid[0])
        return uv, valid

    def project(self, e, observer: ObserverState):
        """ICRF direction(s) to pixels: aberration, rotation, pinhole, distortion, K."""
        e_app = aberrate(e, observer.velocity)
        return self.project_camera(observer.attitude.apply(e_app))

    def unproject(self, u, v, guard: float = 2.0) -> np.ndarray:
        """Unit camera-frame direction(s) for pixel coordinates."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if np.any((u < -guard) | (u > self.cols - 1 + guard) | (v < -guard) | (v > self.rows - 1 + guard)):
            raise ParameterError("pixel outside the sensor guard band")
        x, y = self.image_plane(u, v)
        a = np.stack([x, y, np.ones_like(x)], axis=-1)
        return a / np.linalg.norm(a, axis=-1, keepdims=True)

    def in_bounds(self, uv, margin: float = 0.0) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= margin) & (uv[:, 0] <= self.cols - 1 - margin)
                & (uv[:, 1] >= margin) & (uv[:, 1] <= self.rows - 1 - margin))

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        keys = ("dx", "dy", "up", "vp", "k1", "k2", "k3", "p1", "p2", "rows", "cols")
        missing = [k for k in ("dx", "dy", "up", "vp") if k not in d]
        if missing:
            raise ParameterError(f"camera file missing fields {missing}")
        kw = {k: d[k] for k in keys if k in d}
        kw["rows"] = int(kw.get("rows", DEFAULT_ROWS))
        kw["cols"] = int(kw.get("cols", DEFAULT_COLS))
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "CameraModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def edge_displacement(cam: CameraModel) -> float:
    """Largest pixel shift caused by distortion, evaluated on the sensor border."""
    ideal = cam.replace(k1=0.0, k2=0.0, k3=0.0, p1=0.0, p2=0.0)
    uu = np.r_[np.linspace(0, cam.cols - 1, 65), np.zeros(33), np.full(33, cam.cols - 1.0)]
    vv = np.r_[np.zeros(65), np.linspace(0, cam.rows - 1, 33), np.linspace(0, cam.rows - 1, 33)]
    a = ideal.unproject(uu, vv)
    d1, _ = cam.project_camera(a)
    return float(np.max(np.hypot(d1[:, 0] - uu, d1[:, 1] - vv)))
