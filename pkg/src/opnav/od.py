"""Spacecraft dynamics and measurement-only batch orbit determination.

Point-mass gravity from the Sun, planets and Moon plus cannonball solar
radiation pressure, propagated with an adaptive 8th-order Runge-Kutta
integrator together with the state transition matrix.  The batch estimator
fits the state at a reference epoch (and optionally the SRP coefficient) to
pixel centroids of celestial bodies through the full camera model, with light
time and stellar aberration.

Units are km, s and km/s throughout; the SRP coefficient ``beta = C_R A / m``
is in m²/kg.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from . import ConvergenceError, DegenerateGeometryError, OpnavError, ParameterError
from .camera import CameraModel, ObserverState
from .ephemeris import AU_KM, GM, MEAN_RADIUS_KM, EphemerisSet
from .numerics import LmaProblem, Rotation, solve_lma, unit

SRP_PRESSURE_N_M2 = 4.56e-6
# (N/m²)(m²/kg) = m/s²; 1e-3 converts to km/s², AU² in km² makes the
# inverse-square factor dimensionless at 1 AU
SRP_KM3_S2_PER_BETA = SRP_PRESSURE_N_M2 * 1e-3 * AU_KM**2
DEFAULT_BODIES = ("sun", "mercury", "venus", "earth", "moon", "mars", "jupiter", "saturn")
STATE_NAMES = ("r_x", "r_y", "r_z", "v_x", "v_y", "v_z", "beta_srp")
DEGENERATE_COND = 1e12


class SingularityError(OpnavError, ArithmeticError):
    """The trajectory entered a body's radius."""


class IntegrationError(ConvergenceError):
    """The integrator failed (step-size collapse or similar)."""


@dataclass
class SpacecraftState:
    r: np.ndarray
    v: np.ndarray
    beta_srp: float = 0.0

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.beta_srp = float(self.beta_srp)
        if not self.beta_srp >= 0.0:
            raise ParameterError("SRP coefficient must be non-negative")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])

    def to_dict(self) -> dict:
        return {"r_km": self.r.tolist(), "v_km_s": self.v.tolist(), "beta_srp_m2_kg": self.beta_srp}

    @classmethod
    def from_dict(cls, d: dict) -> "SpacecraftState":
        return cls(d["r_km"], d["v_km_s"], d.get("beta_srp_m2_kg", 0.0))


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


@dataclass
class Dynamics:
    """Force model: point masses for ``bodies`` and optional SRP."""

    eph: EphemerisSet
    bodies: Tuple[str, ...] = DEFAULT_BODIES
    srp: bool = True

    def __post_init__(self):
        self.bodies = tuple(self.bodies)
        for b in self.bodies:
            if b not in GM:
                raise ParameterError(f"no GM for body '{b}'")
            self.eph._source(b)
        if self.srp and "sun" not in self.eph:
            raise ParameterError("SRP needs a Sun ephemeris")

    def _body_positions(self, t: float) -> np.ndarray:
        if not self.bodies:
            return np.empty((0, 3))
        return np.array([self.eph.position(b, t) for b in self.bodies])

    def _sun(self, t: float, pos: np.ndarray) -> np.ndarray:
        if "sun" in self.bodies:
            return pos[self.bodies.index("sun")]
        return self.eph.position("sun", t)

    def accel(self, r, t: float, beta_srp: float = 0.0) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        pos = self._body_positions(t)
        a = np.zeros(3)
        for b, p in zip(self.bodies, pos):
            d = r - p
            n = np.linalg.norm(d)
            if n < MEAN_RADIUS_KM.get(b, 0.0):
                raise SingularityError(f"trajectory inside {b} ({n:.1f} km from its center)")
            a -= GM[b] * d / n**3
        if self.srp and beta_srp:
            d = r - self._sun(t, pos)
            a += SRP_KM3_S2_PER_BETA * beta_srp * d / np.linalg.norm(d) ** 3
        return a

    def partials(self, r, t: float, beta_srp: float = 0.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Acceleration, its gradient with respect to ``r`` and its
        derivative with respect to ``beta_srp``."""
        r = np.asarray(r, dtype=float)
        pos = self._body_positions(t)
        a = np.zeros(3)
        G = np.zeros((3, 3))
        eye = np.eye(3)
        for b, p in zip(self.bodies, pos):
            d = r - p
            n = np.linalg.norm(d)
            if n < MEAN_RADIUS_KM.get(b, 0.0):
                raise SingularityError(f"trajectory inside {b} ({n:.1f} km from its center)")
            a -= GM[b] * d / n**3
            G -= GM[b] * (eye / n**3 - 3.0 * np.outer(d, d) / n**5)
        dbeta = np.zeros(3)
        if self.srp:
            d = r - self._sun(t, pos)
            n = np.linalg.norm(d)
            dbeta = SRP_KM3_S2_PER_BETA * d / n**3
            a += beta_srp * dbeta
            G += beta_srp * SRP_KM3_S2_PER_BETA * (eye / n**3 - 3.0 * np.outer(d, d) / n**5)
        return a, G, dbeta


def accel(r, t: float, beta_srp: float, eph: EphemerisSet, bodies=DEFAULT_BODIES, srp: bool = True) -> np.ndarray:
    """Total acceleration (km/s²) at position ``r`` and epoch ``t``."""
    return Dynamics(eph, bodies, srp).accel(r, t, beta_srp)


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

RTOL = 1e-12
ATOL = 1e-12


def _rhs(dyn: Dynamics, beta: float, with_stm: bool):
    def f(t, y):
        r, v = y[:3], y[3:6]
        if not with_stm:
            return np.concatenate([v, dyn.accel(r, t, beta)])
        a, G, dbeta = dyn.partials(r, t, beta)
        Phi = y[6:].reshape(6, 7)
        dPhi = np.empty((6, 7))
        dPhi[:3] = Phi[3:]
        dPhi[3:] = G @ Phi[:3]
        dPhi[3:, 6] += dbeta
        return np.concatenate([v, a, dPhi.ravel()])
    return f


def _integrate(dyn, x0: SpacecraftState, t0, times, with_stm, rtol, atol):
    """States (and STMs) at sorted ``times`` all on one side of ``t0``."""
    y0 = x0.vector
    if with_stm:
        y0 = np.concatenate([y0, np.eye(6, 7).ravel()])
    t_end = times[-1] if abs(times[-1] - t0) >= abs(times[0] - t0) else times[0]
    sol = solve_ivp(_rhs(dyn, x0.beta_srp, with_stm), (t0, t_end), y0, method="DOP853",
                    t_eval=times, rtol=rtol, atol=atol)
    if sol.status != 0:
        raise IntegrationError(f"integration from {t0} to {t_end} s failed: {sol.message}")
    return sol.y.T


def propagate_many(x0: SpacecraftState, t0: float, times, dyn: Dynamics, with_stm: bool = False,
                   rtol: float = RTOL, atol: float = ATOL):
    """States at arbitrary ``times`` (either side of ``t0``).

    Returns ``(states (n, 6), stms (n, 6, 7) or None)``.
    """
    times = np.asarray(times, dtype=float)
    n = len(times)
    states = np.empty((n, 6))
    stms = np.empty((n, 6, 7)) if with_stm else None
    for side in (times > t0, times < t0):
        idx = np.nonzero(side)[0]
        if idx.size == 0:
            continue
        ts, inv = np.unique(times[idx], return_inverse=True)
        if ts[0] < t0:
            ts, inv = ts[::-1], len(ts) - 1 - inv
        y = _integrate(dyn, x0, t0, ts, with_stm, rtol, atol)[inv]
        states[idx] = y[:, :6]
        if with_stm:
            stms[idx] = y[:, 6:].reshape(-1, 6, 7)
    same = times == t0
    states[same] = x0.vector
    if with_stm:
        stms[same] = np.eye(6, 7)
    return states, stms


def propagate(x0: SpacecraftState, t0: float, t1: float, dyn: Dynamics, rtol: float = RTOL,
              atol: float = ATOL) -> SpacecraftState:
    """State at ``t1`` given the state at ``t0``."""
    if t1 == t0:
        return SpacecraftState(x0.r.copy(), x0.v.copy(), x0.beta_srp)
    y = _integrate(dyn, x0, t0, np.array([t1]), False, rtol, atol)[0]
    return SpacecraftState(y[:3], y[3:6], x0.beta_srp)


def specific_energy(state: SpacecraftState, gm: float = GM["sun"]) -> float:
    return 0.5 * float(state.v @ state.v) - gm / float(np.linalg.norm(state.r))


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------


@dataclass
class OdMeasurement:
    """Pixel centroid of ``body`` received at ``epoch`` with the camera at
    ``attitude`` (inertial to camera); isotropic noise ``sigma_u`` px."""

    epoch: float
    body: str
    uv: np.ndarray
    attitude: Rotation
    sigma_u: float

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float).reshape(2)
        if not self.sigma_u > 0:
            raise ParameterError("sigma_u must be positive")

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "body": self.body, "u": float(self.uv[0]), "v": float(self.uv[1]),
                "quaternion_xyzw": self.attitude.as_quat().tolist(), "sigma_u": self.sigma_u}

    @classmethod
    def from_dict(cls, d: dict) -> "OdMeasurement":
        return cls(float(d["epoch"]), str(d["body"]), [d["u"], d["v"]],
                   Rotation.from_quat(d["quaternion_xyzw"]), float(d["sigma_u"]))


@dataclass
class OdProblem:
    measurements: List[OdMeasurement]
    camera: CameraModel
    dynamics: Dynamics
    t0: Optional[float] = None
    estimate_beta: bool = False
    aberration: bool = True
    light_time: bool = True

    def __post_init__(self):
        self.measurements = sorted(self.measurements, key=lambda m: m.epoch)
        if len(self.measurements) < 4:
            raise ParameterError(f"{len(self.measurements)} measurements; at least 4 are needed")
        if self.t0 is None:
            self.t0 = self.measurements[0].epoch
        eph = self.dynamics.eph
        for m in self.measurements:
            lo, hi = eph.span(m.body)
            if not lo <= m.epoch <= hi:
                raise ParameterError(f"epoch {m.epoch} outside the ephemeris span of '{m.body}'")

    @property
    def n_params(self) -> int:
        return 7 if self.estimate_beta else 6

    @property
    def parameter_names(self) -> List[str]:
        return list(STATE_NAMES[:self.n_params])

    @property
    def epochs(self) -> np.ndarray:
        return np.array([m.epoch for m in self.measurements])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([m.sigma_u for m in self.measurements])

    @property
    def observed(self) -> np.ndarray:
        return np.array([m.uv for m in self.measurements])


def predict_pixel(problem: OdProblem, m: OdMeasurement, r, v) -> np.ndarray:
    """Modelled centroid for a spacecraft at ``r`` moving at ``v``."""
    eph = problem.dynamics.eph
    if problem.light_time:
        p = eph.light_time_corrected_state(m.body, m.epoch, r).position
    else:
        p = eph.position(m.body, m.epoch)
    e = unit(p - np.asarray(r, dtype=float))
    vel = v if problem.aberration else np.zeros(3)
    uv, ok = problem.camera.project(e, ObserverState(vel, m.attitude))
    if not ok:
        return np.full(2, np.nan)
    return uv


def measurement_partials(problem: OdProblem, m: OdMeasurement, r, v) -> np.ndarray:
    """2x6 derivative of the modelled centroid with respect to the
    instantaneous state, by central differences."""
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    p = problem.dynamics.eph.position(m.body, m.epoch)
    # steps large enough to swamp rounding in heliocentric differences,
    # small enough that truncation stays ~(h/range)^2
    hr = max(np.linalg.norm(p - r) * 1e-5, 1e-2)
    hv = 0.1
    H = np.empty((2, 6))
    for k in range(3):
        e = np.zeros(3)
        e[k] = hr
        H[:, k] = (predict_pixel(problem, m, r + e, v) - predict_pixel(problem, m, r - e, v)) / (2 * hr)
        e[k] = hv
        H[:, 3 + k] = (predict_pixel(problem, m, r, v + e) - predict_pixel(problem, m, r, v - e)) / (2 * hv)
    return H


class _Model:
    """Residuals and Jacobian of the batch problem with one-entry caching."""

    def __init__(self, problem: OdProblem, beta_fixed: float):
        self.p = problem
        self.beta_fixed = beta_fixed
        self._key = None
        self._val = None

    def state(self, x) -> SpacecraftState:
        beta = x[6] if self.p.estimate_beta else self.beta_fixed
        s = SpacecraftState(x[:3], x[3:6], 0.0)
        # unconstrained inside the solver: clamping at zero would leave the
        # residual flat while the Jacobian still sees beta, stalling LMA
        s.beta_srp = float(beta)
        return s

    def _eval(self, x, with_jac: bool):
        key = (x.tobytes(), with_jac)
        if self._key == key or (not with_jac and self._key == (x.tobytes(), True)):
            return self._val
        p = self.p
        states, stms = propagate_many(self.state(x), p.t0, p.epochs, p.dynamics, with_stm=with_jac)
        pred = np.array([predict_pixel(p, m, s[:3], s[3:]) for m, s in zip(p.measurements, states)])
        res = (p.observed - pred) / p.sigmas[:, None]
        J = None
        if with_jac:
            rows = []
            for m, s, Phi in zip(p.measurements, states, stms):
                H = measurement_partials(p, m, s[:3], s[3:]) @ Phi[:, :p.n_params]
                rows.append(-H / m.sigma_u)
            J = np.vstack(rows)
        self._key = key
        self._val = (res, J, states)
        return self._val

    def residual(self, x) -> np.ndarray:
        res = self._eval(x, False)[0].ravel()
        # a trial state that puts a body behind the camera is simply bad
        return np.where(np.isfinite(res), res, 1e6)

    def jacobian(self, x) -> np.ndarray:
        return self._eval(x, True)[1]


@dataclass
class OdSolution:
    state: SpacecraftState
    t0: float
    covariance: np.ndarray
    parameter_names: List[str]
    pre_residuals: np.ndarray   # (n, 2) observed - modelled, px, at the initial guess
    post_residuals: np.ndarray  # (n, 2) px at the solution
    sigmas: np.ndarray
    epochs: np.ndarray
    bodies: List[str]
    converged: bool
    iterations: int
    cost_history: List[float] = field(default_factory=list)
    message: str = ""

    @property
    def normalized_post(self) -> np.ndarray:
        return self.post_residuals / self.sigmas[:, None]

    @staticmethod
    def _rms(a) -> float:
        return float(np.sqrt(np.mean(np.sum(a**2, axis=1))))

    @property
    def pre_rms_px(self) -> float:
        return self._rms(self.pre_residuals)

    @property
    def post_rms_px(self) -> float:
        return self._rms(self.post_residuals)

    def mean_zero(self) -> bool:
        """Per-axis test |mean| < 3/sqrt(n) on sigma-normalized residuals."""
        z = self.normalized_post
        return bool(np.all(np.abs(z.mean(axis=0)) < 3.0 / math.sqrt(len(z))))

    def trend(self) -> np.ndarray:
        """Correlation of each normalized residual axis with time."""
        z = self.normalized_post
        t = self.epochs - self.epochs.mean()
        out = []
        for k in range(2):
            zk = z[:, k] - z[:, k].mean()
            den = math.sqrt(float((t @ t) * (zk @ zk)))
            out.append(float(t @ zk / den) if den > 0 else 0.0)
        return np.array(out)

    def sigma(self, name: str) -> float:
        k = self.parameter_names.index(name)
        return float(math.sqrt(self.covariance[k, k]))

    def residual_table(self) -> List[dict]:
        return [{"epoch": float(t), "body": b, "du_pre": float(a[0]), "dv_pre": float(a[1]),
                 "du_post": float(c[0]), "dv_post": float(c[1]), "sigma_u": float(s)}
                for t, b, a, c, s in zip(self.epochs, self.bodies, self.pre_residuals,
                                         self.post_residuals, self.sigmas)]

    def to_dict(self) -> dict:
        return {"t0": self.t0, "state": self.state.to_dict(), "covariance": self.covariance.tolist(),
                "parameters": self.parameter_names, "converged": self.converged,
                "iterations": self.iterations, "pre_rms_px": self.pre_rms_px,
                "post_rms_px": self.post_rms_px, "mean_zero": self.mean_zero(),
                "trend": self.trend().tolist(), "cost_history": list(self.cost_history),
                "message": self.message}


def _check_observability(J: np.ndarray, names: Sequence[str]) -> float:
    col = np.linalg.norm(J, axis=0)
    if np.any(col == 0):
        k = int(np.argmin(col))
        raise DegenerateGeometryError(f"measurements carry no information on {names[k]}")
    s, vt = np.linalg.svd(J / col, full_matrices=False)[1:]
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    if not cond < DEGENERATE_COND or len(s) < len(names):
        null = vt[-1]
        big = np.argsort(-np.abs(null))[:3]
        desc = ", ".join(f"{names[k]} ({null[k]:+.2f})" for k in big)
        raise DegenerateGeometryError(f"state not observable (condition {cond:.2e}); null direction ~ {desc}")
    return cond


def solve_batch(problem: OdProblem, guess: SpacecraftState, max_iter: int = 50) -> OdSolution:
    """Weighted least-squares state at ``problem.t0`` from pixel centroids.

    Attitudes are held fixed.  The SRP coefficient, when estimated, is
    unconstrained; a negative estimate means the data do not determine it.
    Rank deficiency raises
    :class:`DegenerateGeometryError` naming the weak direction; a run that
    stops without converging returns the last iterate with
    ``converged=False``.
    """
    model = _Model(problem, guess.beta_srp)
    x0 = guess.vector if not problem.estimate_beta else np.r_[guess.vector, guess.beta_srp]
    pre = model._eval(x0, True)
    names = problem.parameter_names
    _check_observability(pre[1], names)
    pre_res = pre[0] * problem.sigmas[:, None]
    lma = LmaProblem(model.residual, model.jacobian, xtol=1e-12, ftol=1e-14, max_iter=max_iter)
    sol = solve_lma(lma, x0)
    res, J, _ = model._eval(sol.x, True)
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.full((len(names), len(names)), np.nan)
    return OdSolution(model.state(sol.x), float(problem.t0), cov, names, pre_res,
                      res * problem.sigmas[:, None], problem.sigmas, problem.epochs,
                      [m.body for m in problem.measurements], bool(sol.converged), int(sol.iterations),
                      list(sol.cost_history), getattr(sol, "message", ""))


# ---------------------------------------------------------------------------
# dynamic triangulation refinement
# ---------------------------------------------------------------------------


def los_measurements(obs) -> Tuple[List[OdMeasurement], CameraModel]:
    """Image-plane sightings as pixel measurements of an ideal pinhole with
    focal length 1/IFOV and principal point at the origin."""
    ifov = obs[0].ifov
    if any(not math.isclose(o.ifov, ifov, rel_tol=1e-12) for o in obs):
        raise ParameterError("sightings must share one IFOV")
    cam = CameraModel(1.0 / ifov, 1.0 / ifov, 0.0, 0.0)
    meas = [OdMeasurement(o.epoch, o.body, o.xbar[:2] / ifov, o.attitude, o.sigma_u) for o in obs]
    return meas, cam


@dataclass
class RefinedIod:
    solution: object          # IodSolution with stage "refined"
    batch: OdSolution
    improvement: float        # reprojection RMS before / after


def refine_iod(linear, obs, dynamics: Dynamics, camera: Optional[CameraModel] = None,
               measurements: Optional[List[OdMeasurement]] = None, aberration: bool = False,
               light_time: bool = True, max_iter: int = 50) -> RefinedIod:
    """Polish a linear (rectilinear) IOD with the full dynamics by
    minimizing reprojection error.

    ``obs`` are the sightings used for the linear stage; they are re-used as
    pinhole pixel measurements unless ``measurements`` and ``camera`` are
    given.  Sightings from :meth:`LosObservation.from_pixel` with the
    observer velocity are already aberration-free, hence the default.
    """
    from .triangulation import IodSolution

    if not (np.all(np.isfinite(linear.r0)) and np.all(np.isfinite(linear.v0))):
        raise ParameterError("linear IOD solution is not finite")
    if measurements is None:
        measurements, camera = los_measurements(obs)
    elif camera is None:
        raise ParameterError("a camera is required with pixel measurements")
    prob = OdProblem(list(measurements), camera, dynamics, t0=linear.t0, aberration=aberration,
                     light_time=light_time)
    batch = solve_batch(prob, SpacecraftState(linear.r0, linear.v0), max_iter=max_iter)
    ratio = batch.pre_rms_px / batch.post_rms_px if batch.post_rms_px > 0 else float("inf")
    refined = IodSolution(batch.state.r, batch.state.v, linear.t0, "refined", linear.condition)
    return RefinedIod(refined, batch, ratio)
