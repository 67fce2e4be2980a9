"""Shared math: skew matrices, rotations, SLERP and a Levenberg-Marquardt solver.

Rotation convention
-------------------
Quaternions are stored scalar-last ``[x, y, z, w]`` and describe *passive*
rotations (frame transformations): ``Rotation.apply(v)`` re-expresses the
components of ``v`` in the rotated frame.  The attitude matrix is

    T(q) = (w^2 - |q_v|^2) I + 2 q_v q_v^T - 2 w [q_v x]

which is the transpose of the active Hamilton rotation matrix.  Quaternion
multiplication is the Hamilton product, so with passive matrices composition
reads ``T(q1 * q2) = T(q2) @ T(q1)``.  ``Rotation.__matmul__`` hides that and
composes matrices in the natural order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

EPS = np.finfo(float).eps


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unit(v, axis=-1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def quat_multiply(q1, q2) -> np.ndarray:
    """Hamilton product of scalar-last quaternions."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])


class Rotation:
    """Passive rotation held as a unit scalar-last quaternion.

    Construct with one of the ``from_*`` class methods.  Instances are
    immutable; the quaternion is normalized on construction and its sign is
    fixed so that ``w >= 0``.
    """

    __slots__ = ("_q",)

    def __init__(self, quat):
        q = np.asarray(quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        if q[3] < 0:
            q = -q
        q.flags.writeable = False
        self._q = q

    @classmethod
    def identity(cls) -> "Rotation":
        return cls([0.0, 0.0, 0.0, 1.0])

    @classmethod
    def from_quat(cls, quat) -> "Rotation":
        return cls(quat)

    @classmethod
    def from_matrix(cls, T) -> "Rotation":
        """Shepperd's method on a passive attitude matrix."""
        T = np.asarray(T, dtype=float)
        tr = np.trace(T)
        # candidates for 4*q_k^2 - 1 ... pick the largest for stability
        diag = np.array([T[0, 0], T[1, 1], T[2, 2], tr])
        k = int(np.argmax(diag))
        if k == 3:
            w = 0.5 * np.sqrt(1.0 + tr)
            f = 0.25 / w
            q = [f * (T[1, 2] - T[2, 1]), f * (T[2, 0] - T[0, 2]), f * (T[0, 1] - T[1, 0]), w]
        elif k == 0:
            x = 0.5 * np.sqrt(1.0 + 2 * T[0, 0] - tr)
            f = 0.25 / x
            q = [x, f * (T[0, 1] + T[1, 0]), f * (T[0, 2] + T[2, 0]), f * (T[1, 2] - T[2, 1])]
        elif k == 1:
            y = 0.5 * np.sqrt(1.0 + 2 * T[1, 1] - tr)
            f = 0.25 / y
            q = [f * (T[0, 1] + T[1, 0]), y, f * (T[1, 2] + T[2, 1]), f * (T[2, 0] - T[0, 2])]
        else:
            z = 0.5 * np.sqrt(1.0 + 2 * T[2, 2] - tr)
            f = 0.25 / z
            q = [f * (T[0, 2] + T[2, 0]), f * (T[1, 2] + T[2, 1]), z, f * (T[0, 1] - T[1, 0])]
        return cls(q)

    @classmethod
    def from_rotvec(cls, rv) -> "Rotation":
        """Frame rotation by angle ``|rv|`` about axis ``rv/|rv|`` (radians)."""
        rv = np.asarray(rv, dtype=float).reshape(3)
        angle = np.linalg.norm(rv)
        if angle < 1e-8:
            # second-order series of sin(a/2)/a keeps full precision
            s = 0.5 - angle**2 / 48.0
        else:
            s = np.sin(0.5 * angle) / angle
        return cls(np.r_[s * rv, np.cos(0.5 * angle)])

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        return cls.from_rotvec(unit(axis) * angle)

    @classmethod
    def align_boresight(cls, boresight, roll: float = 0.0) -> "Rotation":
        """Camera attitude whose +Z axis points along ``boresight`` (ICRF).

        The camera +X axis is chosen perpendicular to the ICRF pole where
        possible, then rotated by ``roll`` about the boresight.
        """
        z = unit(boresight)
        ref = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.99 else np.array([1.0, 0.0, 0.0])
        x = unit(np.cross(ref, z))
        y = np.cross(z, x)
        T = np.vstack([x, y, z])
        base = cls.from_matrix(T)
        if roll:
            return cls.from_rotvec([0.0, 0.0, roll]) @ base
        return base

    def as_quat(self) -> np.ndarray:
        return self._q.copy()

    def as_matrix(self) -> np.ndarray:
        x, y, z, w = self._q
        qv = np.array([x, y, z])
        return (w * w - qv @ qv) * np.eye(3) + 2.0 * np.outer(qv, qv) - 2.0 * w * skew(qv)

    def as_rotvec(self) -> np.ndarray:
        qv = self._q[:3]
        w = self._q[3]
        s = np.linalg.norm(qv)
        angle = 2.0 * np.arctan2(s, w)
        if s < 1e-12:
            return 2.0 * qv / w
        return qv / s * angle

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return float(2.0 * np.arctan2(np.linalg.norm(self._q[:3]), abs(self._q[3])))

    def inv(self) -> "Rotation":
        x, y, z, w = self._q
        return Rotation([-x, -y, -z, w])

    def apply(self, v) -> np.ndarray:
        """Express vector(s) ``v`` (shape (3,) or (n, 3)) in the rotated frame."""
        v = np.asarray(v, dtype=float)
        return v @ self.as_matrix().T

    def __matmul__(self, other: "Rotation") -> "Rotation":
        # T(self) @ T(other) as a passive chain: apply ``other`` first
        return Rotation(quat_multiply(other._q, self._q))

    def __repr__(self) -> str:
        return f"Rotation(quat={np.array2string(self._q, precision=12)})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Rotation) and np.array_equal(self._q, other._q)

    def __hash__(self) -> int:
        return hash(self._q.tobytes())


def angle_between(r1: Rotation, r2: Rotation) -> float:
    """Angle of the rotation taking ``r1`` to ``r2`` (radians)."""
    return (r2 @ r1.inv()).angle()


def slerp(q0: Rotation, q1: Rotation, t: float) -> Rotation:
    """Spherical linear interpolation between two rotations.

    The sign of ``q1`` is flipped when needed so the shortest arc is taken.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"slerp fraction must lie in [0, 1], got {t}")
    a = q0.as_quat()
    b = q1.as_quat()
    dot = float(a @ b)
    if dot < 0.0:
        b = -b
        dot = -dot
    if t == 0.0:
        return Rotation(a)
    if t == 1.0:
        return Rotation(b)
    theta = np.arccos(min(dot, 1.0))
    if theta < 1e-12:
        return Rotation((1.0 - t) * a + t * b)
    s = np.sin(theta)
    return Rotation((np.sin((1.0 - t) * theta) * a + np.sin(t * theta) * b) / s)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


class LmaError(RuntimeError):
    """Raised when the least-squares search cannot continue."""


@dataclass
class LmaProblem:
    """A nonlinear least-squares problem ``min 0.5 * |r(x)|^2``.

    ``jacobian`` is optional; central differences are used when it is absent.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    damping: float = 1e-3
    xtol: float = 1e-10
    ftol: float = 1e-12
    max_iter: int = 100
    damping_ceiling: float = 1e16

    def __post_init__(self):
        if self.xtol <= 0 or self.ftol <= 0:
            raise ValueError("tolerances must be positive")
        if self.damping <= 0:
            raise ValueError("damping seed must be positive")


@dataclass
class LmaResult:
    x: np.ndarray
    cost_history: list
    converged: bool
    iterations: int
    jacobian: np.ndarray
    residual: np.ndarray
    message: str = ""
    nfev: int = 0
    steps: list = field(default_factory=list)

    @property
    def cost(self) -> float:
        return self.cost_history[-1]

    def covariance(self) -> np.ndarray:
        """Inverse of the Gauss-Newton information ``J^T J`` at the solution."""
        return np.linalg.pinv(self.jacobian.T @ self.jacobian)


def numeric_jacobian(fun, x, f0=None) -> np.ndarray:
    """Central-difference Jacobian with step ``sqrt(eps) * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = np.sqrt(EPS) * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (xp[i] - xm[i]))
    return np.column_stack(cols)


def _check_finite(r, iteration, where):
    if not np.all(np.isfinite(r)):
        raise LmaError(f"non-finite residual at iteration {iteration} ({where})")


def solve_lma(problem: LmaProblem, x0, callback=None) -> LmaResult:
    """Minimize ``0.5 * |r(x)|^2`` with Marquardt-damped Gauss-Newton steps.

    The damping term is ``lambda * diag(J^T J)`` (with a floor for empty
    columns); lambda is divided by 10 after an accepted step and multiplied
    by 10 after a rejected one.  Only cost-decreasing steps are accepted, so
    ``cost_history`` is non-increasing.
    """
    x = np.array(x0, dtype=float)
    fun = problem.residual
    r = np.asarray(fun(x), dtype=float)
    nfev = 1
    _check_finite(r, 0, "initial point")
    if r.size < x.size:
        raise ValueError(f"{r.size} residuals cannot determine {x.size} parameters")

    def jac(xx, rr):
        if problem.jacobian is not None:
            return np.asarray(problem.jacobian(xx), dtype=float)
        return numeric_jacobian(fun, xx, rr)

    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = problem.damping
    J = jac(x, r)
    converged = False
    message = "maximum iterations reached"
    it = 0
    steps = []
    while it < problem.max_iter:
        it += 1
        g = J.T @ r
        A = J.T @ J
        d = np.diag(A).copy()
        floor = max(float(d.max()) if d.size else 0.0, 1.0) * 1e-12
        d = np.maximum(d, floor)
        accepted = False
        while not accepted:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
                if not np.all(np.isfinite(step)):
                    raise np.linalg.LinAlgError("non-finite step")
            except np.linalg.LinAlgError:
                lam *= 10.0
                if lam > problem.damping_ceiling:
                    raise LmaError(f"normal matrix singular at iteration {it}; damping exceeded ceiling")
                continue
            x_new = x + step
            r_new = np.asarray(fun(x_new), dtype=float)
            nfev += 1
            _check_finite(r_new, it, "trial step")
            cost_new = 0.5 * float(r_new @ r_new)
            if cost_new <= cost:
                accepted = True
            else:
                lam *= 10.0
                if lam > problem.damping_ceiling:
                    message = "damping exceeded ceiling without cost decrease"
                    converged = _small(step, x, problem.xtol) or cost == 0.0
                    return LmaResult(x, history, converged, it, J, r, message, nfev, steps)
        dcost = cost - cost_new
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        steps.append(float(np.linalg.norm(step)))
        lam = max(lam / 10.0, 1e-15)
        if callback is not None:
            callback(it, x, cost)
        if _small(step, x, problem.xtol):
            converged = True
            message = "step size below tolerance"
            break
        if dcost <= problem.ftol * max(cost + dcost, EPS) or cost == 0.0:
            converged = True
            message = "relative cost decrease below tolerance"
            break
        J = jac(x, r)
    if converged:
        J = jac(x, r)
    return LmaResult(x, history, converged, it, J, r, message, nfev, steps)


def _small(step, x, xtol) -> bool:
    return bool(np.linalg.norm(step) <= xtol * (np.linalg.norm(x) + xtol))
