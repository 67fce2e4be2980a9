"""Triangulation of observer position from lines of sight to bodies at known
positions: DLT, midpoint, LOST (optionally with the analytic light-time
correction), their covariances, and the linear initial-orbit system for
sequential sightings.

Positions are km in the inertial frame, epochs are seconds, and image-plane
coordinates are the undistorted ``x̄ = (x, y, 1)`` of the pinhole model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import DegenerateGeometryError, ParameterError
from .camera import CameraModel, deaberrate
from .ephemeris import C_KM_S
from .numerics import LmaProblem, Rotation, skew, solve_lma

DEGENERATE_COND = 1e12
ORTHOGONAL_COND = 1e6
S_MATRIX = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass
class LosObservation:
    """One sighting of ``body``: camera-frame image-plane point ``xbar``,
    camera attitude ``attitude`` (inertial to camera) and centroid noise
    ``sigma_u`` in pixels, converted with ``ifov`` (rad/px)."""

    epoch: float
    body: str
    xbar: np.ndarray
    attitude: Rotation
    sigma_u: float
    ifov: float

    def __post_init__(self):
        x = np.asarray(self.xbar, dtype=float).reshape(3)
        if not math.isclose(x[2], 1.0, abs_tol=1e-12):
            raise ParameterError("image-plane point must have third component 1")
        if not self.sigma_u > 0:
            raise ParameterError("centroid noise sigma_u must be positive")
        if not self.ifov > 0:
            raise ParameterError("IFOV must be positive")
        self.xbar = x

    @property
    def sigma_x(self) -> float:
        return self.sigma_u * self.ifov

    @property
    def a(self) -> np.ndarray:
        """Unit camera-frame LOS."""
        return self.xbar / np.linalg.norm(self.xbar)

    @property
    def los_inertial(self) -> np.ndarray:
        return self.attitude.inv().apply(self.a)

    @classmethod
    def from_camera_direction(cls, a, attitude: Rotation, sigma_u: float, ifov: float,
                              epoch: float = 0.0, body: str = "") -> "LosObservation":
        a = np.asarray(a, dtype=float)
        if a[2] <= 0:
            raise ParameterError("direction is behind the camera")
        return cls(epoch, body, a / a[2], attitude, sigma_u, ifov)

    @classmethod
    def from_inertial(cls, los, attitude: Rotation, sigma_u: float, ifov: float,
                      epoch: float = 0.0, body: str = "") -> "LosObservation":
        return cls.from_camera_direction(attitude.apply(np.asarray(los, dtype=float)), attitude, sigma_u,
                                         ifov, epoch, body)

    @classmethod
    def from_pixel(cls, camera: CameraModel, u: float, v: float, attitude: Rotation, sigma_u: float,
                   epoch: float = 0.0, body: str = "", observer_velocity=None) -> "LosObservation":
        """Measured centroid to observation; removes stellar aberration when
        ``observer_velocity`` (km/s) is given."""
        x, y = camera.image_plane(u, v)
        a = np.array([float(x), float(y), 1.0])
        if observer_velocity is not None:
            e_app = attitude.inv().apply(a / np.linalg.norm(a))
            a = attitude.apply(deaberrate(e_app, observer_velocity))
        return cls.from_camera_direction(a, attitude, sigma_u, camera.ifov, epoch, body)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "body": self.body, "xbar": self.xbar.tolist(),
                "quaternion_xyzw": self.attitude.as_quat().tolist(), "sigma_u": self.sigma_u, "ifov": self.ifov}

    @classmethod
    def from_dict(cls, d: dict) -> "LosObservation":
        return cls(float(d["epoch"]), str(d.get("body", "")), np.asarray(d["xbar"], dtype=float),
                   Rotation.from_quat(d["quaternion_xyzw"]), float(d["sigma_u"]), float(d["ifov"]))


@dataclass
class TriangulationSolution:
    r: np.ndarray
    P: Optional[np.ndarray]
    method: str
    residuals: np.ndarray  # (n, 2) predicted minus measured image-plane, rad-equivalent
    condition: float = float("nan")
    mahalanobis: Optional[float] = None

    @property
    def total_error(self) -> float:
        return float(math.sqrt(np.trace(self.P))) if self.P is not None else float("nan")

    def residuals_px(self, ifov: float) -> np.ndarray:
        return self.residuals / ifov

    def to_dict(self) -> dict:
        return {"method": self.method, "r_km": self.r.tolist(),
                "P_km2": None if self.P is None else self.P.tolist(),
                "sqrt_trace_P_km": self.total_error, "condition": self.condition,
                "residuals_image_plane": self.residuals.tolist(), "mahalanobis": self.mahalanobis}


@dataclass
class IodSolution:
    r0: np.ndarray
    v0: np.ndarray
    t0: float
    stage: str = "linear"
    condition: float = float("nan")

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.r0, self.v0])

    def to_dict(self) -> dict:
        return {"t0": self.t0, "r0_km": self.r0.tolist(), "v0_km_s": self.v0.tolist(), "stage": self.stage,
                "condition": self.condition}


# ---------------------------------------------------------------------------
# shared linear machinery
# ---------------------------------------------------------------------------


def _check(obs: Sequence[LosObservation], p) -> np.ndarray:
    if len(obs) < 2:
        raise ParameterError("triangulation needs at least two observations")
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if p.shape != (len(obs), 3):
        raise ParameterError(f"expected {len(obs)} body positions, got shape {p.shape}")
    return p


def solve_linear(A: np.ndarray, b: np.ndarray):
    """Least-squares solve with a degeneracy guard.

    Normal equations when well conditioned, an orthogonal (SVD) solve when
    the condition number exceeds 1e6, and an error beyond 1e12.
    """
    s = np.linalg.svd(A, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    if not cond < DEGENERATE_COND:
        raise DegenerateGeometryError(f"lines of sight are (nearly) parallel: condition {cond:.3g}")
    if cond > ORTHOGONAL_COND:
        x = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        x = np.linalg.solve(A.T @ A, A.T @ b)
    return x, cond


def image_plane_residuals(obs: Sequence[LosObservation], p, r) -> np.ndarray:
    """Predicted minus measured image-plane coordinates for position ``r``."""
    out = np.empty((len(obs), 2))
    for k, (o, pk) in enumerate(zip(obs, p)):
        g = o.attitude.apply(pk - r)
        out[k] = g[:2] / g[2] - o.xbar[:2] if g[2] > 0 else np.nan
    return out


def _dlt_rows(obs, p, weights):
    A = np.vstack([w * skew(o.a) @ o.attitude.as_matrix() for o, w in zip(obs, weights)])
    b = np.concatenate([w * skew(o.a) @ o.attitude.as_matrix() @ pk for o, pk, w in zip(obs, p, weights)])
    return A, b


def dlt_covariance(obs: Sequence[LosObservation], p, r, weights=None) -> np.ndarray:
    """First-order (sandwich) covariance of a weighted DLT solution under
    isotropic image-plane noise ``sigma_x``."""
    p = _check(obs, p)
    w = np.ones(len(obs)) if weights is None else np.asarray(weights, dtype=float)
    A, _ = _dlt_rows(obs, p, w)
    M = np.linalg.inv(A.T @ A)
    E = S_MATRIX.T
    mid = np.zeros((3, 3))
    for k, (o, pk) in enumerate(zip(obs, p)):
        T = o.attitude.as_matrix()
        a = o.a
        g = T @ (r - pk)
        G = -w[k] / np.linalg.norm(o.xbar) * skew(g) @ (np.eye(3) - np.outer(a, a)) @ E
        Ak = A[3 * k:3 * k + 3]
        mid += o.sigma_x**2 * Ak.T @ G @ G.T @ Ak
    P = M @ mid @ M
    return 0.5 * (P + P.T)


def triangulate_dlt(obs: Sequence[LosObservation], p, weights=None,
                    covariance: bool = True) -> TriangulationSolution:
    """Weighted DLT; unit weights give the midpoint estimate."""
    p = _check(obs, p)
    w = np.ones(len(obs)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(obs),) or np.any(w <= 0):
        raise ParameterError("weights must be positive, one per observation")
    A, b = _dlt_rows(obs, p, w)
    r, cond = solve_linear(A, b)
    P = dlt_covariance(obs, p, r, w) if covariance else None
    return TriangulationSolution(r, P, "dlt", image_plane_residuals(obs, p, r), cond)


def triangulate_midpoint(obs: Sequence[LosObservation], p) -> TriangulationSolution:
    """Point minimizing the summed squared perpendicular distances to two LOPs."""
    if len(obs) != 2:
        raise ParameterError(f"the midpoint method takes exactly two observations, got {len(obs)}")
    sol = triangulate_dlt(obs, p)
    sol.method = "midpoint"
    return sol


# ---------------------------------------------------------------------------
# LOST
# ---------------------------------------------------------------------------


def _pairing(ell, p) -> List[int]:
    """Partner index for each observation: the one with the widest LOS
    separation whose LOP does not pass through this body."""
    out = []
    for i in range(len(ell)):
        best, best_ang = -1, -1.0
        for j in range(len(ell)):
            if j == i:
                continue
            d = p[i] - p[j]
            if np.linalg.norm(np.cross(d, ell[j])) <= 1e-12 * max(np.linalg.norm(d), 1.0):
                continue
            ang = np.linalg.norm(np.cross(ell[i], ell[j]))
            if ang > best_ang:
                best, best_ang = j, ang
        if best < 0:
            raise DegenerateGeometryError(f"observation {i} has no usable partner for LOST weighting")
        out.append(best)
    return out


def lost_weights(obs: Sequence[LosObservation], p, body_velocities=None) -> np.ndarray:
    """``q_i = |ℓx̄_i × ℓx̄_j| / (σ_x |d_ij × ℓx̄_j|)`` with ``ℓx̄`` the
    inertial image-plane vector and ``d_ij = p_i - p_j``.

    With ``body_velocities`` the sightlines are augmented to
    ``ℓ_i + v_i / c`` so that the sine-rule range ``|d_ij × ℓ_j| / |ℓ_i × ℓ_j|``
    refers to the emission point while ``p`` holds capture-time positions.
    """
    p = _check(obs, p)
    for o in obs:
        if not o.sigma_x > 0:
            raise ParameterError("sigma_x must be positive")
    ell = np.array([o.los_inertial for o in obs])
    if body_velocities is not None:
        ell = ell + np.atleast_2d(np.asarray(body_velocities, dtype=float)) / C_KM_S
    q = np.empty(len(obs))
    for i, j in enumerate(_pairing(ell, p)):
        num = np.linalg.norm(np.cross(ell[i], ell[j]))
        den = np.linalg.norm(np.cross(p[i] - p[j], ell[j]))
        if num == 0.0 or den == 0.0:
            raise DegenerateGeometryError(f"LOST weight for observation {i} is undefined")
        q[i] = np.linalg.norm(obs[i].xbar) * num / (obs[i].sigma_x * den)
    return q


def _lost_rows(obs, q):
    return [qk * S_MATRIX @ skew(o.xbar) @ o.attitude.as_matrix() for o, qk in zip(obs, q)]


def covariance_mle(obs: Sequence[LosObservation], p) -> np.ndarray:
    """Error covariance of the maximum-likelihood position, ``(HᵀH)⁻¹`` with
    ``H`` the stacked LOST rows."""
    p = _check(obs, p)
    q = lost_weights(obs, p)
    H = np.vstack(_lost_rows(obs, q))
    info = H.T @ H
    s = np.linalg.svd(info, compute_uv=False)
    if s[-1] <= s[0] / DEGENERATE_COND**2 * 1e6 or s[-1] == 0:
        raise DegenerateGeometryError("singular triangulation information matrix")
    P = np.linalg.inv(info)
    return 0.5 * (P + P.T)


def triangulate_lost(obs: Sequence[LosObservation], p, body_velocities=None,
                     covariance: bool = True) -> TriangulationSolution:
    """Linear optimal sine triangulation.

    ``p`` are body positions at light emission, or, with
    ``body_velocities`` (km/s) given, at image capture; in that case the
    light-time shift enters the right-hand side analytically through
    ``m_i = (|x̄_i| / σ_x) v_i / c``.
    """
    p = _check(obs, p)
    q = lost_weights(obs, p, body_velocities)
    rows = _lost_rows(obs, q)
    A = np.vstack(rows)
    if body_velocities is None:
        b = np.concatenate([R @ pk for R, pk in zip(rows, p)])
        method = "lost"
    else:
        vel = np.atleast_2d(np.asarray(body_velocities, dtype=float))
        if vel.shape != p.shape:
            raise ParameterError("one body velocity per observation is required")
        b = np.concatenate([S_MATRIX @ skew(o.xbar) @ o.attitude.as_matrix()
                            @ (qk * pk - np.linalg.norm(o.xbar) / o.sigma_x * vk / C_KM_S)
                            for o, qk, pk, vk in zip(obs, q, p, vel)])
        method = "lost+ltof"
    r, cond = solve_linear(A, b)
    P = None
    if covariance:
        info = A.T @ A
        P = np.linalg.inv(info)
        P = 0.5 * (P + P.T)
    return TriangulationSolution(r, P, method, image_plane_residuals(obs, p, r), cond)


def retarded_positions(p_capture, body_velocities, r) -> np.ndarray:
    """First-order emission-time positions ``p⁺ - v |p⁺ - r| / c``."""
    p = np.atleast_2d(np.asarray(p_capture, dtype=float))
    v = np.atleast_2d(np.asarray(body_velocities, dtype=float))
    rho = np.linalg.norm(p - np.asarray(r, dtype=float), axis=1, keepdims=True)
    return p - v * rho / C_KM_S


def triangulate_lost_iterative_ltof(obs: Sequence[LosObservation], body_position: Callable,
                                    t_capture: Sequence[float], tol: float = 1e-6,
                                    max_iter: int = 20) -> TriangulationSolution:
    """LOST with light time found by fixed-point iteration.

    ``body_position(k, t)`` returns body ``k``'s position at time ``t``;
    each pass backdates every body by its current light time and
    re-triangulates until the position moves less than ``tol`` km.
    """
    p = np.array([body_position(k, t) for k, t in enumerate(t_capture)])
    sol = triangulate_lost(obs, p, covariance=False)
    for _ in range(max_iter):
        dt = np.linalg.norm(p - sol.r, axis=1) / C_KM_S
        p = np.array([body_position(k, t - d) for k, (t, d) in enumerate(zip(t_capture, dt))])
        new = triangulate_lost(obs, p)
        moved = np.linalg.norm(new.r - sol.r)
        sol = new
        if moved < tol:
            sol.method = "lost+iterative-ltof"
            return sol
    sol.method = "lost+iterative-ltof"
    return sol


def triangulate_mle(obs: Sequence[LosObservation], p, r0=None) -> TriangulationSolution:
    """Iterative minimization of the σ-weighted image-plane reprojection
    error (independent route to the maximum-likelihood position)."""
    p = _check(obs, p)
    if r0 is None:
        r0 = triangulate_dlt(obs, p, covariance=False).r
    sig = np.array([o.sigma_x for o in obs])
    scale = max(np.linalg.norm(r0), 1.0)

    def residual(x):
        return (image_plane_residuals(obs, p, x * scale) / sig[:, None]).ravel()

    fit = solve_lma(LmaProblem(residual, xtol=1e-15, ftol=1e-20, max_iter=50), np.asarray(r0) / scale)
    r = fit.x * scale
    J = fit.jacobian / scale
    P = np.linalg.inv(J.T @ J)
    return TriangulationSolution(r, 0.5 * (P + P.T), "mle", image_plane_residuals(obs, p, r))


# ---------------------------------------------------------------------------
# error diagnostics
# ---------------------------------------------------------------------------


def total_error_approx(rho1: float, rho2: float, theta12: float, sigma_x: float) -> float:
    """Closed-form total 1-sigma position error for two narrow-field
    sightings at ranges ``rho1``, ``rho2`` separated by ``theta12``."""
    s = math.sin(theta12)
    if not 0.0 < theta12 < math.pi:
        raise ParameterError("separation angle must lie in (0, pi)")
    if s == 0.0:
        return math.inf
    a2, b2 = rho1 * rho1, rho2 * rho2
    return sigma_x * math.sqrt(a2 * a2 + a2 * b2 * s * s + 2 * a2 * b2 + b2 * b2) / (math.sqrt(a2 + b2) * s)


def mahalanobis(solution: TriangulationSolution, r_ref) -> float:
    if solution.P is None:
        raise ParameterError("solution carries no covariance")
    d = np.asarray(solution.r, dtype=float) - np.asarray(r_ref, dtype=float)
    try:
        L = np.linalg.cholesky(solution.P)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("covariance is not positive definite") from exc
    z = np.linalg.solve(L, d)
    return float(math.sqrt(z @ z))


def separation_deg(l1, l2) -> float:
    """Angle between two LOS in degrees."""
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(l1, l2)), float(l1 @ l2)))


def separation_residual_arcsec(measured_deg: float, predicted_deg: float) -> float:
    """Magnitude of the measured-minus-predicted inter-body angle, arcsec."""
    return abs(measured_deg - predicted_deg) * 3600.0


def residual_frames(solution: TriangulationSolution, r_ref, obs: Sequence[LosObservation]) -> dict:
    """Position residual in the inertial frame and in the first observation's
    camera frame."""
    d = np.asarray(solution.r) - np.asarray(r_ref)
    return {"inertial_km": d, "camera0_km": obs[0].attitude.apply(d), "norm_km": float(np.linalg.norm(d))}


# ---------------------------------------------------------------------------
# sequential sightings: linear initial orbit
# ---------------------------------------------------------------------------


def rectilinear_stm(t: float, t0: float) -> np.ndarray:
    """Position rows ``[Φ_rr Φ_rv]`` for straight-line motion."""
    return np.hstack([np.eye(3), (t - t0) * np.eye(3)])


_STATE_NAMES = ("x", "y", "z", "vx", "vy", "vz")


def iod_linear(obs: Sequence[LosObservation], p, t0: Optional[float] = None,
               stm: Callable = rectilinear_stm) -> IodSolution:
    """Initial state at ``t0`` from sequential sightings.

    Stacks ``[ℓ_i×] Φ_r(t_i, t0) [r0; v0] = [ℓ_i×] p_i`` with ``ℓ_i`` the
    inertial LOS; ``stm(t, t0)`` returns the 3x6 position rows.
    """
    if len(obs) < 2:
        raise ParameterError("need sightings at two or more epochs")
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if p.shape != (len(obs), 3):
        raise ParameterError("one body position per observation is required")
    if t0 is None:
        t0 = min(o.epoch for o in obs)
    A = np.vstack([skew(o.los_inertial) @ stm(o.epoch, t0) for o in obs])
    b = np.concatenate([skew(o.los_inertial) @ pk for o, pk in zip(obs, p)])
    col = np.linalg.norm(A, axis=0)
    col[col == 0] = 1.0
    As = A / col
    _, s, vt = np.linalg.svd(As)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    if len(s) < 6 or not cond < DEGENERATE_COND:
        null = vt[-1]
        big = np.argsort(-np.abs(null))[:2]
        names = ", ".join(f"{_STATE_NAMES[k]} ({null[k]:+.2f})" for k in big)
        raise DegenerateGeometryError(f"sightings do not determine the state (rank < 6); null direction ~ {names}")
    x = np.linalg.lstsq(As, b, rcond=None)[0] / col
    return IodSolution(x[:3], x[3:], float(t0), "linear", cond)
