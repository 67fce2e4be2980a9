"""Low-precision solar-system ephemerides and the light-time solver.

All states are ICRF-aligned, in km and km/s, with the Sun at the origin
(standing in for the solar-system barycenter).  Time is a uniform count of
seconds past the reference epoch 2023-07-22 00:00:00.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from . import ConvergenceError, ParameterError

C_KM_S = 299792.458
AU_KM = 149597870.7
DAY_S = 86400.0
YEAR_S = 365.25 * DAY_S
OBLIQUITY_J2000 = math.radians(23.43928)

REFERENCE_EPOCH = datetime(2023, 7, 22, 0, 0, 0)
J2000 = datetime(2000, 1, 1, 12, 0, 0)
# seconds from J2000 to the reference epoch (leap seconds ignored)
J2000_TO_REFERENCE_S = (REFERENCE_EPOCH - J2000).total_seconds()

GM = {
    "sun": 1.32712440018e11,
    "mercury": 22031.78,
    "venus": 324858.59,
    "earth": 398600.435,
    "moon": 4902.800,
    "mars": 42828.37,
    "jupiter": 126712764.1,
    "saturn": 37940584.8,
}

MEAN_RADIUS_KM = {
    "sun": 695700.0,
    "mercury": 2439.7,
    "venus": 6051.8,
    "earth": 6371.0,
    "moon": 1737.4,
    "mars": 3389.5,
    "jupiter": 69911.0,
    "saturn": 58232.0,
}

BODIES = ("sun", "mercury", "venus", "earth", "moon", "mars", "jupiter", "saturn", "spacecraft")

# J2000 mean heliocentric ecliptic elements: a [AU], e, I, L, long. perihelion, node [deg]
_MEAN_ELEMENTS = {
    "mercury": (0.38709927, 0.20563593, 7.00497902, 252.25032350, 77.45779628, 48.33076593),
    "venus": (0.72333566, 0.00677672, 3.39467605, 181.97909950, 131.60246718, 76.67984255),
    "earth": (1.00000261, 0.01671123, -0.00001531, 100.46457166, 102.93768193, 0.0),
    "mars": (1.52371034, 0.09339410, 1.84969142, -4.55343205, -23.94362959, 49.55953891),
    "jupiter": (5.20288700, 0.04838624, 1.30439695, 34.39644051, 14.72847983, 100.47390909),
    "saturn": (9.53667594, 0.05386179, 2.48599187, 49.95424423, 92.59887831, 113.66242448),
}


def ecliptic_to_icrf() -> np.ndarray:
    c, s = math.cos(OBLIQUITY_J2000), math.sin(OBLIQUITY_J2000)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def solve_kepler(M: float, e: float, tol: float = 1e-15) -> float:
    """Eccentric anomaly from mean anomaly by safeguarded Newton iteration."""
    if not 0.0 <= e < 1.0:
        raise ParameterError(f"eccentricity must lie in [0, 1), got {e}")
    M = math.remainder(M, 2.0 * math.pi)
    E = M if e < 0.8 else math.copysign(math.pi, M) if M != 0 else 0.0
    for _ in range(60):
        f = E - e * math.sin(E) - M
        dE = f / (1.0 - e * math.cos(E))
        E -= dE
        if abs(dE) < tol:
            return E
    raise ConvergenceError(f"Kepler equation did not converge (M={M}, e={e})")


@dataclass(frozen=True)
class KeplerSource:
    """Two-body conic about a central body.

    Angles in radians, ``a`` in km, ``mean_anomaly`` at ``epoch`` (s).  The
    elements are referred to the frame given by ``frame_rotation`` (default:
    J2000 ecliptic, rotated to ICRF by the mean obliquity).
    """

    a: float
    e: float
    inc: float
    raan: float
    argp: float
    mean_anomaly: float
    gm: float
    center: Optional[str] = "sun"
    epoch: float = 0.0
    ecliptic: bool = True
    span: Tuple[float, float] = (-50 * YEAR_S, 50 * YEAR_S)

    def __post_init__(self):
        if not 0.0 <= self.e < 1.0:
            raise ParameterError(f"eccentricity must lie in [0, 1), got {self.e}")
        if self.a <= 0 or self.gm <= 0:
            raise ParameterError("semi-major axis and GM must be positive")

    @property
    def mean_motion(self) -> float:
        return math.sqrt(self.gm / self.a**3)

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.mean_motion

    def _pqw_to_frame(self) -> np.ndarray:
        cO, sO = math.cos(self.raan), math.sin(self.raan)
        cw, sw = math.cos(self.argp), math.sin(self.argp)
        ci, si = math.cos(self.inc), math.sin(self.inc)
        R = np.array([
            [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
            [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
            [sw * si, cw * si, ci],
        ])
        if self.ecliptic:
            R = ecliptic_to_icrf() @ R
        return R

    def relative_state(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        n = self.mean_motion
        M = self.mean_anomaly + n * (t - self.epoch)
        E = solve_kepler(M, self.e)
        cE, sE = math.cos(E), math.sin(E)
        b = self.a * math.sqrt(1.0 - self.e**2)
        r_pqw = np.array([self.a * (cE - self.e), b * sE, 0.0])
        Edot = n / (1.0 - self.e * cE)
        v_pqw = np.array([-self.a * sE * Edot, b * cE * Edot, 0.0])
        R = self._pqw_to_frame()
        return R @ r_pqw, R @ v_pqw

    def to_dict(self) -> dict:
        return {
            "type": "kepler", "a": self.a, "e": self.e, "inc": self.inc, "raan": self.raan,
            "argp": self.argp, "mean_anomaly": self.mean_anomaly, "gm": self.gm,
            "center": self.center, "epoch": self.epoch, "ecliptic": self.ecliptic,
            "span": list(self.span),
        }


@dataclass(frozen=True)
class TableSource:
    """Tabulated states interpolated by piecewise cubic Hermite polynomials."""

    times: np.ndarray
    states: np.ndarray
    order: int = 3
    center: Optional[str] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.states, dtype=float)
        if t.ndim != 1 or x.shape != (t.size, 6):
            raise ParameterError("table needs times (n,) and states (n, 6)")
        if t.size < 2 or np.any(np.diff(t) <= 0):
            raise ParameterError("table times must be strictly increasing with at least two rows")
        if self.order != 3:
            raise ParameterError("only cubic Hermite interpolation (order 3) is supported")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def relative_state(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        ts = self.times
        k = int(np.searchsorted(ts, t, side="right")) - 1
        k = min(max(k, 0), ts.size - 2)
        if t == ts[k]:
            return self.states[k, :3].copy(), self.states[k, 3:].copy()
        h = ts[k + 1] - ts[k]
        s = (t - ts[k]) / h
        p0, v0 = self.states[k, :3], self.states[k, 3:]
        p1, v1 = self.states[k + 1, :3], self.states[k + 1, 3:]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        pos = h00 * p0 + h10 * h * v0 + h01 * p1 + h11 * h * v1
        d00 = (6 * s**2 - 6 * s) / h
        d10 = 3 * s**2 - 4 * s + 1
        d01 = (-6 * s**2 + 6 * s) / h
        d11 = 3 * s**2 - 2 * s
        vel = d00 * p0 + d10 * v0 + d01 * p1 + d11 * v1
        return pos, vel

    def to_dict(self) -> dict:
        rows = np.column_stack([self.times, self.states]).tolist()
        return {"type": "table", "order": self.order, "center": self.center, "rows": rows}


@dataclass(frozen=True)
class FixedSource:
    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    span: Tuple[float, float] = (-math.inf, math.inf)
    center: Optional[str] = None

    def relative_state(self, t: float):
        return np.array(self.position, dtype=float), np.zeros(3)

    def to_dict(self) -> dict:
        return {"type": "fixed", "position": list(self.position)}


Source = Union[KeplerSource, TableSource, FixedSource]


@dataclass(frozen=True)
class LightTimeResult:
    position: np.ndarray
    delta_t: float
    velocity: np.ndarray
    iterations: int


@dataclass
class EphemerisSet:
    """Named state sources.  Immutable by convention after construction."""

    sources: Dict[str, Source] = field(default_factory=dict)
    time_system: str = "uniform seconds past 2023-07-22T00:00:00"

    def __contains__(self, body: str) -> bool:
        return body in self.sources

    def bodies(self):
        return tuple(self.sources)

    def span(self, body: str) -> Tuple[float, float]:
        src = self._source(body)
        lo, hi = src.span
        if src.center is not None:
            clo, chi = self.span(src.center)
            lo, hi = max(lo, clo), min(hi, chi)
        return lo, hi

    def _source(self, body: str) -> Source:
        try:
            return self.sources[body]
        except KeyError:
            raise ParameterError(f"unknown body '{body}'; available: {sorted(self.sources)}") from None

    def state(self, body: str, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Position (km) and velocity (km/s) of ``body`` at epoch ``t`` (s)."""
        src = self._source(body)
        lo, hi = src.span
        if not (lo <= t <= hi) or not math.isfinite(t):
            raise ParameterError(f"epoch {t} s outside the span [{lo}, {hi}] of '{body}'")
        r, v = src.relative_state(float(t))
        if src.center is not None:
            rc, vc = self.state(src.center, t)
            r, v = r + rc, v + vc
        return r, v

    def position(self, body: str, t: float) -> np.ndarray:
        return self.state(body, t)[0]

    def light_time_corrected_state(self, body: str, t_rx: float, observer_pos, tol: float = 1e-9,
                                   max_iter: int = 10) -> LightTimeResult:
        """Body position at the emission time of light received at ``t_rx``.

        Fixed-point iteration on ``dt = |p(t_rx - dt) - observer| / c``.
        """
        if body == "spacecraft":
            raise ParameterError("light-time correction is defined for celestial bodies only")
        obs = np.asarray(observer_pos, dtype=float)
        dt = 0.0
        for it in range(1, max_iter + 1):
            p, v = self.state(body, t_rx - dt)
            dt_new = float(np.linalg.norm(p - obs)) / C_KM_S
            if abs(dt_new - dt) < tol:
                p, v = self.state(body, t_rx - dt_new)
                return LightTimeResult(p, dt_new, v, it)
            dt = dt_new
        raise ConvergenceError(f"light-time iteration for '{body}' did not converge in {max_iter} iterations")

    def to_dict(self) -> dict:
        return {
            "time_system": self.time_system,
            "bodies": [{"body": name, **src.to_dict()} for name, src in self.sources.items()],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, data: dict) -> "EphemerisSet":
        sources = {}
        for entry in data["bodies"]:
            entry = dict(entry)
            name = entry.pop("body")
            kind = entry.pop("type")
            if kind == "kepler":
                entry["span"] = tuple(entry.get("span", (-50 * YEAR_S, 50 * YEAR_S)))
                sources[name] = KeplerSource(**entry)
            elif kind == "table":
                rows = np.asarray(entry["rows"], dtype=float)
                sources[name] = TableSource(rows[:, 0], rows[:, 1:], entry.get("order", 3), entry.get("center"))
            elif kind == "fixed":
                sources[name] = FixedSource(tuple(entry.get("position", (0.0, 0.0, 0.0))))
            else:
                raise ParameterError(f"unknown ephemeris source type '{kind}' for '{name}'")
        return cls(sources, data.get("time_system", cls.time_system))

    @classmethod
    def load(cls, path) -> "EphemerisSet":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_source(self, name: str, source: Source) -> "EphemerisSet":
        new = dict(self.sources)
        new[name] = source
        return EphemerisSet(new, self.time_system)


def default_ephemeris() -> EphemerisSet:
    """Mean-element planets, a Keplerian Moon, and the Sun fixed at the origin."""
    dt_j2000 = J2000_TO_REFERENCE_S
    sources: Dict[str, Source] = {"sun": FixedSource()}
    for name, (a_au, e, inc, L, lperi, node) in _MEAN_ELEMENTS.items():
        a = a_au * AU_KM
        gm = GM["sun"] + (GM["earth"] + GM["moon"] if name == "earth" else GM[name])
        n = math.sqrt(gm / a**3)
        M_j2000 = math.radians(L - lperi)
        sources[name] = KeplerSource(
            a=a, e=e, inc=math.radians(inc), raan=math.radians(node),
            argp=math.radians(lperi - node), mean_anomaly=M_j2000 + n * dt_j2000,
            gm=gm, center="sun",
        )
    sources["moon"] = KeplerSource(
        a=384400.0, e=0.0549, inc=math.radians(5.145), raan=math.radians(125.08),
        argp=math.radians(318.15), mean_anomaly=math.radians(135.27),
        gm=GM["earth"] + GM["moon"], center="earth",
    )
    return EphemerisSet(sources)


def table_from_function(fun, t0: float, t1: float, step: float) -> TableSource:
    """Sample ``fun(t) -> (r, v)`` on a uniform grid into a table source."""
    n = max(int(math.ceil((t1 - t0) / step)), 1)
    times = np.linspace(t0, t1, n + 1)
    states = np.array([np.r_[fun(t)] for t in times])
    return TableSource(times, states)
