"""Resolved and semi-resolved body localization.

Rendering of constant-albedo spheres under the lunar-Lambert reflectance
law, template generation (pixel integration then PSF defocus), NCC template
registration, center of brightness with the Lambert-sphere photocenter
correction, and horizon-based limb localization with a sphere cone fit that
turns lit-limb pixels into a line of sight and a range.

Image conventions follow :mod:`opnav.imaging`: arrays are ``[row, col]`` and
pixel ``(row, col)`` is centered at ``u = col``, ``v = row``.  Two-dimensional
sun directions are unit ``(du, dv)`` vectors pointing from the body center
toward the Sun as seen in the image.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from . import ConvergenceError, OpnavError, ParameterError
from .camera import CameraModel
from .ephemeris import MEAN_RADIUS_KM
from .imaging import center_of_brightness, detect_blobs, ncc, scanlines, sobel, subpixel_peak
from .numerics import LmaProblem, Rotation, solve_lma, unit
from .psf import PsfModel, defocus, kernel_radius

LUNAR_LAMBERT = "lunar-lambert"
LAMBERT = "lambert"
LIT_MASK = "lit"  # 1 on the lit, visible surface; for area bookkeeping
MODELS = (LUNAR_LAMBERT, LAMBERT, LIT_MASK)
BLEND_SCALE = math.radians(60.0)


class InsufficientLimbError(OpnavError):
    """Too few lit-limb points to fit a horizon."""


# ---------------------------------------------------------------------------
# reflectance
# ---------------------------------------------------------------------------


def blend_weight(g):
    """Lommel-Seeliger weight beta(g) = exp(-g / 60 deg)."""
    return np.exp(-np.asarray(g, dtype=float) / BLEND_SCALE)


def _reflectance(cos_i, cos_e, g, model: str = LUNAR_LAMBERT):
    cos_i = np.asarray(cos_i, dtype=float)
    cos_e = np.asarray(cos_e, dtype=float)
    ok = (cos_i >= 0.0) & (cos_e > 0.0)
    ci = np.where(ok, cos_i, 0.0)
    if model == LIT_MASK:
        return ok.astype(float)
    if model == LAMBERT:
        return ci
    ce = np.where(ok, cos_e, 1.0)
    beta = blend_weight(g)
    with np.errstate(invalid="ignore", divide="ignore"):
        ls = np.where(ok & (ci + ce > 0), 2.0 * ci / (ci + ce), 0.0)
    return (1.0 - beta) * ci + beta * ls


def lunar_lambert(i, e, g):
    """Lunar-Lambert reflectance for incidence ``i``, emission ``e`` and
    phase ``g`` (radians).  Unlit or invisible geometry gives zero."""
    return _reflectance(np.cos(i), np.cos(e), g)


# ---------------------------------------------------------------------------
# render geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RenderSpec:
    """Geometry of a sphere seen by a pinhole camera.

    ``center_cam`` is the body center in the camera frame (km) and
    ``sun_cam`` the unit body-to-Sun direction in the camera frame.  The
    pinhole has focal length ``focal_px`` and principal point ``principal``.
    """

    body_radius_km: float
    center_cam: np.ndarray
    sun_cam: np.ndarray
    focal_px: float
    principal: Tuple[float, float]
    model: str = LUNAR_LAMBERT
    supersample: int = 8

    def __post_init__(self):
        c = np.asarray(self.center_cam, dtype=float)
        s = np.asarray(self.sun_cam, dtype=float)
        object.__setattr__(self, "center_cam", c)
        object.__setattr__(self, "sun_cam", s / np.linalg.norm(s))
        if not self.body_radius_km > 0:
            raise ParameterError("body radius must be positive")
        if self.model not in MODELS:
            raise ParameterError(f"reflectance model must be one of {MODELS}")
        if int(self.supersample) < 1:
            raise ParameterError("supersample must be >= 1")
        if not c[2] > self.body_radius_km:
            raise ParameterError("body is behind or straddles the camera")
        if not self.focal_px > 0:
            raise ParameterError("focal length must be positive")
        if self.phase >= math.pi - 1e-12:
            raise ParameterError("phase angle must be < pi")

    @classmethod
    def at_pixel(cls, radius_px: float, phase: float, sun_angle: float, center_uv,
                 camera: Optional[CameraModel] = None, body_radius_km: float = MEAN_RADIUS_KM["moon"],
                 model: str = LUNAR_LAMBERT, supersample: int = 8) -> "RenderSpec":
        """Sphere of apparent radius ``radius_px`` centered on pixel
        ``center_uv`` with the Sun at image position angle ``sun_angle``
        (radians from +u toward +v) and phase angle ``phase``."""
        if not radius_px > 0:
            raise ParameterError("apparent radius must be positive")
        if not 0.0 <= phase < math.pi:
            raise ParameterError("phase angle must lie in [0, pi)")
        cam = camera or CameraModel.default()
        rng = body_radius_km / math.sin(math.atan(radius_px / cam.dx))
        u, v = center_uv
        c_hat = unit(np.array([(u - cam.up) / cam.dx, (v - cam.vp) / cam.dy, 1.0]))
        p = np.array([math.cos(sun_angle), math.sin(sun_angle), 0.0])
        w = unit(p - (p @ c_hat) * c_hat)
        s = -math.cos(phase) * c_hat + math.sin(phase) * w
        return cls(body_radius_km, rng * c_hat, s, cam.dx, (cam.up, cam.vp), model, supersample)

    @classmethod
    def from_geometry(cls, camera: CameraModel, attitude: Rotation, observer_pos, body_pos, sun_pos,
                      body_radius_km: float, model: str = LUNAR_LAMBERT,
                      supersample: int = 8) -> "RenderSpec":
        """Spec from inertial positions (km) and the camera attitude."""
        rel = np.asarray(body_pos, float) - np.asarray(observer_pos, float)
        s = unit(np.asarray(sun_pos, float) - np.asarray(body_pos, float))
        return cls(body_radius_km, attitude.apply(rel), attitude.apply(s), camera.dx,
                   (camera.up, camera.vp), model, supersample)

    def replace(self, **kw) -> "RenderSpec":
        return replace(self, **kw)

    @property
    def range_km(self) -> float:
        return float(np.linalg.norm(self.center_cam))

    @property
    def phase(self) -> float:
        c_hat = self.center_cam / np.linalg.norm(self.center_cam)
        return float(math.acos(np.clip(-self.sun_cam @ c_hat, -1.0, 1.0)))

    @property
    def apparent_radius(self) -> float:
        """Apparent radius in pixels (on-axis approximation)."""
        return self.focal_px * math.tan(math.asin(self.body_radius_km / self.range_km))

    @property
    def effective_supersample(self) -> int:
        """Sub-pixel grid size: at least ``supersample`` and fine enough that
        the sample spacing stays below R/48 for small disks."""
        return int(min(max(self.supersample, math.ceil(48.0 / self.apparent_radius)), 64))

    @property
    def extent_px(self) -> float:
        """Upper bound on the projected disk's half-extent in pixels."""
        c = self.center_cam
        cos_off = c[2] / np.linalg.norm(c)
        return self.apparent_radius / cos_off**2 * 1.02

    @property
    def center_uv(self) -> np.ndarray:
        c = self.center_cam
        return np.array([self.principal[0] + self.focal_px * c[0] / c[2],
                         self.principal[1] + self.focal_px * c[1] / c[2]])

    @property
    def sun_image_dir(self) -> np.ndarray:
        """Unit image-plane direction from the body center toward the Sun
        (zero when the Sun lies on the line of sight)."""
        c, s = self.center_cam, self.sun_cam
        d = np.array([s[0] * c[2] - c[0] * s[2], s[1] * c[2] - c[1] * s[2]])
        n = np.linalg.norm(d)
        return d / n if n > 1e-15 else np.zeros(2)

    def moved_to(self, center_uv) -> "RenderSpec":
        """Same range and camera-frame sun direction, new image position."""
        u, v = center_uv
        c_hat = unit(np.array([(u - self.principal[0]) / self.focal_px,
                               (v - self.principal[1]) / self.focal_px, 1.0]))
        return self.replace(center_cam=self.range_km * c_hat)


def render_sphere(spec: RenderSpec, shape, origin=(0, 0), flux: float = 1.0) -> np.ndarray:
    """Pixel-integrated radiance of the sphere on a ``shape`` raster.

    Each pixel is split into ``supersample``² sub-pixels; a ray through each
    sub-pixel center is intersected with the sphere and shaded with the
    reflectance model.  The value is the sub-pixel mean times ``flux``, so a
    fully lit face-on pixel reads ``flux``.  ``origin`` is the ``(row, col)``
    of the raster's first pixel in image coordinates.
    """
    rows, cols = int(shape[0]), int(shape[1])
    r0, c0 = int(origin[0]), int(origin[1])
    out = np.zeros((rows, cols))
    uc, vc = spec.center_uv
    half = spec.extent_px + 2.0
    cmin = max(int(math.floor(uc - half)) - c0, 0)
    cmax = min(int(math.ceil(uc + half)) - c0, cols - 1)
    rmin = max(int(math.floor(vc - half)) - r0, 0)
    rmax = min(int(math.ceil(vc + half)) - r0, rows - 1)
    if cmin > cmax or rmin > rmax:
        return out
    n = spec.effective_supersample
    sub = (np.arange(n) + 0.5) / n - 0.5
    cc = np.arange(cmin, cmax + 1) + c0
    rr = np.arange(rmin, rmax + 1) + r0
    U = (cc[None, :, None, None] + sub[None, None, None, :]) * np.ones((len(rr), 1, n, 1))
    V = (rr[:, None, None, None] + sub[None, None, :, None]) * np.ones((1, len(cc), 1, n))
    d = np.stack([(U - spec.principal[0]) / spec.focal_px,
                  (V - spec.principal[1]) / spec.focal_px,
                  np.ones_like(U)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    c = spec.center_cam
    b = d @ c
    disc = b * b - (c @ c - spec.body_radius_km**2)
    hit = disc >= 0.0
    t = b - np.sqrt(np.where(hit, disc, 0.0))
    nrm = (t[..., None] * d - c) / spec.body_radius_km
    cos_i = nrm @ spec.sun_cam
    cos_e = -np.einsum("...k,...k->...", nrm, d)
    val = np.where(hit, _reflectance(cos_i, cos_e, spec.phase, spec.model), 0.0)
    out[rmin:rmax + 1, cmin:cmax + 1] = flux * val.mean(axis=(2, 3))
    return out


def lit_area_px(spec: RenderSpec) -> float:
    """Analytic lit area (px²) of the projected disk in the orthographic
    limit: half disk plus or minus half the terminator ellipse."""
    R = spec.apparent_radius
    return 0.5 * math.pi * R * R * (1.0 + math.cos(spec.phase))


# ---------------------------------------------------------------------------
# templates and NCC
# ---------------------------------------------------------------------------


@dataclass
class Template:
    data: np.ndarray
    center: np.ndarray      # geometric center (u, v) in template coordinates
    origin: Tuple[int, int]  # image (row, col) of the template's first pixel


def template_half_size(spec: RenderSpec, psf: Optional[PsfModel]) -> int:
    w = 0.0 if psf is None else max(4.0 * psf.width, kernel_radius(psf.kind, psf.width, 1e-4))
    return int(math.ceil(spec.extent_px + w)) + 2


def make_template(spec: RenderSpec, psf: Optional[PsfModel] = None, flux: float = 1.0) -> Template:
    """Render the sphere over its window, integrated per pixel, then defocus.

    The window is centered on the pixel nearest ``spec.center_uv`` so the
    template carries the spec's sub-pixel phase.
    """
    h = template_half_size(spec, psf)
    uc, vc = spec.center_uv
    origin = (int(round(vc)) - h, int(round(uc)) - h)
    img = render_sphere(spec, (2 * h + 1, 2 * h + 1), origin, flux)
    if psf is not None:
        img = defocus(img, psf)
    return Template(img, np.array([uc - origin[1], vc - origin[0]]), origin)


@dataclass
class NccLocation:
    u: float
    v: float
    score: float
    low_confidence: bool
    iterations: int
    message: str = ""

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


def _ncc_pass(img, spec, psf, est, radius, r_off, c_off):
    t = make_template(spec.moved_to(est), psf)
    th, tw = t.data.shape
    top, left = t.origin[0] - r_off, t.origin[1] - c_off
    wr0, wc0 = max(top - radius, 0), max(left - radius, 0)
    wr1, wc1 = min(top + radius + th, img.shape[0]), min(left + radius + tw, img.shape[1])
    win = img[wr0:wr1, wc0:wc1]
    if win.shape[0] < th or win.shape[1] < tw:
        raise ParameterError("search window falls outside the image")
    s = ncc(win, t.data)
    pk = np.unravel_index(int(np.argmax(s)), s.shape)
    msg = ""
    if 1 <= pk[0] < s.shape[0] - 1 and 1 <= pk[1] < s.shape[1] - 1:
        sp = subpixel_peak(s, pk)
        pu, pv = sp.u, sp.v
        msg = "" if sp.ok else sp.message
    else:
        pu, pv = float(pk[1]), float(pk[0])
        msg = "correlation peak on search-window edge"
    new = np.array([wc0 + pu + t.center[0] + c_off, wr0 + pv + t.center[1] + r_off])
    return new, float(s[pk]), msg


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum() * (b * b).sum()))
    return float((a * b).sum() / den) if den > 0 else 0.0


def _polish(img, spec, psf, est, r_off, c_off, max_iter=10, tol=2e-4):
    """Maximize the correlation over a continuous template shift.

    Fits ``a * T(c) + b`` to a fixed image patch by Gauss-Newton, where the
    sub-pixel center ``c`` enters through re-rendering the template.
    """
    t0 = make_template(spec.moved_to(est), psf)
    th, tw = t0.data.shape
    top, left = t0.origin[0] - r_off, t0.origin[1] - c_off
    if top < 0 or left < 0 or top + th > img.shape[0] or left + tw > img.shape[1]:
        return None
    patch = img[top:top + th, left:left + tw].ravel()
    origin = t0.origin
    h = (th - 1) // 2
    # finite-difference step spans several supersample cells so the
    # staircase of the sampled render averages out
    step = 0.05
    ones = np.ones(patch.size)

    def render_at(c):
        # the window stays fixed while the center moves
        im = render_sphere(spec.moved_to(c), (th, tw), origin)
        return (defocus(im, psf) if psf is not None else im).ravel()

    def fit(T):
        A = np.column_stack([T, ones])
        ab = np.linalg.lstsq(A, patch, rcond=None)[0]
        r = A @ ab - patch
        return float(r @ r), ab, r

    c = np.asarray(est, dtype=float).copy()
    T = t0.data.ravel()
    f, ab, r = fit(T)
    # the shift Jacobian barely changes over a fraction of a pixel, so it is
    # computed once
    du = (render_at(c + [step, 0.0]) - render_at(c - [step, 0.0])) / (2 * step)
    dv = (render_at(c + [0.0, step]) - render_at(c - [0.0, step])) / (2 * step)
    for _ in range(max_iter):
        J = np.column_stack([ab[0] * du, ab[0] * dv, T, ones])
        delta = np.linalg.lstsq(J, -r, rcond=None)[0][:2]
        for _half in range(6):
            Tn = render_at(c + delta)
            fn, abn, rn = fit(Tn)
            if fn <= f:
                break
            delta = 0.5 * delta
        else:
            break
        c, T, f, ab, r = c + delta, Tn, fn, abn, rn
        if np.linalg.norm(delta) < tol:
            break
    if not np.all(np.isfinite(c)) or np.linalg.norm(c - est) > min(1.0, h):
        return None
    return c, _pearson(T, patch)


def locate_ncc(img, spec: RenderSpec, psf: Optional[PsfModel] = None, search_radius: int = 6,
               passes: int = 2, min_score: float = 0.5, polish: bool = True,
               origin=(0, 0)) -> NccLocation:
    """Geometric center of the body by template registration.

    ``spec.center_uv`` is the a-priori center (image coordinates; ``origin``
    is the ``(row, col)`` of ``img``'s first pixel).  Each NCC pass renders
    the template at the current estimate, correlates it over a window of
    ``±search_radius`` px and refines the peak with a paraboloid.  The
    paraboloid vertex is biased for lopsided crescents, so the result is
    polished by maximizing the correlation over a continuous template shift.
    """
    img = np.asarray(img, dtype=float)
    r_off, c_off = int(origin[0]), int(origin[1])
    est = np.asarray(spec.center_uv, dtype=float)
    radius = int(search_radius)
    score, msg = 0.0, ""
    it = 0
    for it in range(1, passes + 1):
        est, score, msg = _ncc_pass(img, spec, psf, est, radius, r_off, c_off)
        radius = 2
    if polish and score >= min_score:
        out = _polish(img, spec, psf, est, r_off, c_off)
        if out is None:
            msg = msg or "sub-pixel polish rejected; paraboloid estimate kept"
        else:
            est, score = out
            it += 1
    low = score < min_score
    if low and not msg:
        msg = f"peak score {score:.3f} below {min_score}"
    return NccLocation(float(est[0]), float(est[1]), score, low, it, msg)


# ---------------------------------------------------------------------------
# center of brightness and photocenter correction
# ---------------------------------------------------------------------------


def photocenter_offset(radius_px: float, phase: float) -> float:
    """Distance (px) from the geometric center to the brightness centroid of
    a Lambert sphere at phase angle ``phase``; zero at ``phase = 0``."""
    if not radius_px > 0:
        raise ParameterError("apparent radius must be positive")
    if not 0.0 <= phase < math.pi:
        raise ParameterError("phase angle must lie in [0, pi)")
    if phase == 0.0:
        return 0.0
    den = (math.pi - phase) / math.tan(phase) + 1.0
    return radius_px * (3.0 * math.pi / 16.0) * (1.0 + math.cos(phase)) / den


def photocenter_correct(cob, radius_px: float, phase: float, u_illum) -> np.ndarray:
    """Shift a center of brightness along ``u_illum``, the image-plane
    direction in which sunlight travels (away from the Sun)."""
    d = np.asarray(u_illum, dtype=float)
    if not np.isclose(np.linalg.norm(d), 1.0, atol=1e-6):
        raise ParameterError("u_illum must be a unit 2-vector")
    return np.asarray(cob, dtype=float) + photocenter_offset(radius_px, phase) * d


def body_cob(img, threshold: float, background: float = 0.0, origin=(0, 0), near=None) -> np.ndarray:
    """Center of brightness of the brightest (or nearest to ``near``)
    connected region above ``threshold``."""
    blobs = detect_blobs(img, threshold, min_pixels=1)
    if not blobs:
        raise InsufficientLimbError("no pixels above threshold")
    img = np.asarray(img, dtype=float)
    if near is not None:
        key = lambda b: np.hypot(*(b.uv + [origin[1], origin[0]] - np.asarray(near)))  # noqa: E731
        blob = min(blobs, key=key)
    else:
        blob = max(blobs, key=lambda b: b.total)
    rows, cols = blob.pixels[:, 0], blob.pixels[:, 1]
    u, v = center_of_brightness(img[rows, cols] - background, rows, cols)
    return np.array([u + origin[1], v + origin[0]])


# ---------------------------------------------------------------------------
# limb extraction
# ---------------------------------------------------------------------------


@dataclass
class LimbPointSet:
    uv: np.ndarray            # (n, 2) sub-pixel limb points
    gradient_dir: np.ndarray  # (n,) Sobel gradient direction, radians
    scan_dir: np.ndarray      # unit (du, dv) direction of light travel

    def __len__(self) -> int:
        return len(self.uv)


def _auto_threshold(img) -> float:
    bg = float(np.median(img))
    top = float(np.percentile(img, 99.9))
    return bg + 0.25 * (top - bg)


def locate_limb(img, sun_dir, center0, radius0: float, threshold: Optional[float] = None,
                spacing: float = 0.5, band: Optional[float] = None,
                max_grad_angle_deg: float = 55.0) -> LimbPointSet:
    """Sub-pixel points on the lit limb of a resolved body.

    A coarse illumination scan (lines travelling away from the Sun) marks the
    first bright pixel of each line; Sobel edges inside that mask and inside
    an annulus about the a-priori circle are kept.  A dense re-scan then takes
    the first edge crossing of each line, so the terminator, which lies
    behind the lit region along the scan, never contributes.  The gradient
    peak is refined along the scan with a three-point quadratic.
    """
    img = np.asarray(img, dtype=float)
    s = np.asarray(sun_dir, dtype=float)
    if np.linalg.norm(s) == 0:
        raise ParameterError("sun direction is undefined")
    light = -s / np.linalg.norm(s)
    if 2.0 * radius0 < 8.0:
        raise ParameterError("limb extraction needs an apparent diameter of at least 8 px")
    thr = _auto_threshold(img) if threshold is None else float(threshold)
    c0 = np.asarray(center0, dtype=float)
    band = max(3.0, 0.3 * radius0) if band is None else band

    mask = np.zeros(img.shape, dtype=bool)
    for rr, cc in scanlines(img.shape, light, 1.0):
        above = np.nonzero(img[rr, cc] > thr)[0]
        if above.size:
            mask[rr[above[0]], cc[above[0]]] = True
    if not mask.any():
        raise InsufficientLimbError("no illuminated pixels found")
    mask = ndimage.binary_dilation(mask, iterations=3)
    vv, uu = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    ring = np.abs(np.hypot(uu - c0[0], vv - c0[1]) - radius0) < band
    mag, ang = sobel(img)
    cos_ok = np.cos(ang) * light[0] + np.sin(ang) * light[1] > math.cos(math.radians(max_grad_angle_deg))
    cand = mask & ring
    if not cand.any():
        raise InsufficientLimbError("illuminated region does not meet the a-priori limb")
    edges = cand & cos_ok & (mag > 0.2 * mag[cand].max())

    step = 0.25
    pts, dirs = [], []
    rows, cols = img.shape
    perp = np.array([-light[1], light[0]])
    mid = np.array([(cols - 1) / 2.0, (rows - 1) / 2.0])
    half = 0.5 * math.hypot(rows, cols) + 1.0
    ts = np.arange(-half, half + step, step)
    for o in np.arange(-half, half + spacing, spacing):
        line = mid + o * perp + ts[:, None] * light
        ci = np.rint(line[:, 0]).astype(int)
        ri = np.rint(line[:, 1]).astype(int)
        inside = (ci >= 1) & (ci < cols - 1) & (ri >= 1) & (ri < rows - 1)
        if not inside.any():
            continue
        idx = np.nonzero(inside)[0]
        hit = idx[edges[ri[idx], ci[idx]]]
        if hit.size == 0:
            continue
        k0 = hit[0]
        seg = np.arange(max(k0 - 4, idx[0]), min(k0 + 13, idx[-1] + 1))
        m = ndimage.map_coordinates(mag, [line[seg, 1], line[seg, 0]], order=3, mode="nearest")
        k = seg[int(np.argmax(m))]
        p = line[k]
        trio = np.array([p - light, p, p + light])
        f = ndimage.map_coordinates(mag, [trio[:, 1], trio[:, 0]], order=3, mode="nearest")
        curv = f[0] - 2.0 * f[1] + f[2]
        if curv >= 0:
            continue
        delta = float(np.clip(0.5 * (f[0] - f[2]) / curv, -1.0, 1.0))
        q = p + delta * light
        if not (0 <= q[0] <= cols - 1 and 0 <= q[1] <= rows - 1):
            continue
        pts.append(q)
        dirs.append(float(ndimage.map_coordinates(ang, [[q[1]], [q[0]]], order=0)[0]))
    if len(pts) < 5:
        raise InsufficientLimbError(f"only {len(pts)} limb points found (need 5)")
    return LimbPointSet(np.array(pts), np.array(dirs), light)


# ---------------------------------------------------------------------------
# horizon fit
# ---------------------------------------------------------------------------


@dataclass
class LimbLos:
    los_camera: np.ndarray
    los_inertial: Optional[np.ndarray]
    range_km: float
    half_angle: float
    center_uv: np.ndarray
    radius_px: float
    rms_px: float
    arc_deg: float
    n_points: int
    warning: str = ""
    residuals_px: np.ndarray = field(default_factory=lambda: np.empty(0))


def arc_span_deg(uv, center) -> float:
    """Angular extent of points around ``center`` (360 minus the widest gap)."""
    d = np.asarray(uv, float) - np.asarray(center, float)
    a = np.sort(np.degrees(np.arctan2(d[:, 1], d[:, 0])) % 360.0)
    if len(a) < 2:
        return 0.0
    gaps = np.diff(np.r_[a, a[0] + 360.0])
    return float(360.0 - gaps.max())


def fit_cone(rays, scale: float = 1.0, max_iter: int = 50) -> Tuple[np.ndarray, float, np.ndarray]:
    """Axis ``d`` and half-angle ``alpha`` of the circular cone through unit
    ``rays``: a linear solve of ``ray . n = 1`` then Levenberg-Marquardt on
    the angular residuals (multiplied by ``scale``)."""
    S = np.asarray(rays, dtype=float)
    if len(S) < 3:
        raise InsufficientLimbError("a cone needs at least 3 rays")
    n, *_ = np.linalg.lstsq(S, np.ones(len(S)), rcond=None)
    nn = np.linalg.norm(n)
    if not np.isfinite(nn) or nn < 1.0:
        raise ConvergenceError("linear cone fit failed")
    d0 = n / nn
    alpha0 = math.acos(1.0 / nn)
    e1 = unit(np.cross(d0, [1.0, 0.0, 0.0] if abs(d0[0]) < 0.9 else [0.0, 1.0, 0.0]))
    e2 = np.cross(d0, e1)

    def axis(x):
        return unit(d0 + x[0] * e1 + x[1] * e2)

    def resid(x):
        d = axis(x)
        ang = np.arctan2(np.linalg.norm(np.cross(S, d), axis=1), S @ d)
        return (ang - x[2]) * scale

    sol = solve_lma(LmaProblem(resid, max_iter=max_iter), np.array([0.0, 0.0, alpha0]))
    if not np.all(np.isfinite(sol.x)):
        raise ConvergenceError("cone fit diverged")
    return axis(sol.x), float(sol.x[2]), resid(sol.x)


def limb_to_los(points, body_radius_km: float, camera: CameraModel,
                attitude: Optional[Rotation] = None, min_arc_deg: float = 60.0) -> LimbLos:
    """Line of sight to the body center and range from lit-limb pixels.

    Limb rays of a sphere lie on a cone about the center direction whose
    half-angle ``alpha`` satisfies ``sin(alpha) = R / range``.
    """
    uv = points.uv if isinstance(points, LimbPointSet) else np.asarray(points, dtype=float)
    if len(uv) < 5:
        raise InsufficientLimbError(f"{len(uv)} limb points; need at least 5")
    rays = camera.unproject(uv[:, 0], uv[:, 1])
    d, alpha, res = fit_cone(rays, scale=camera.dx)
    (cu, cv), _ = camera.project_camera(d)
    arc = arc_span_deg(uv, (cu, cv))
    warn = ""
    if arc < min_arc_deg:
        warn = f"limb arc spans {arc:.1f} deg (< {min_arc_deg:.0f}); fit poorly conditioned"
        warnings.warn(warn, RuntimeWarning, stacklevel=2)
    los_i = attitude.inv().apply(d) if attitude is not None else None
    return LimbLos(d, los_i, body_radius_km / math.sin(alpha), alpha, np.array([cu, cv]),
                   camera.dx * math.tan(alpha), float(np.sqrt(np.mean(res**2))), arc, len(uv), warn, res)
