"""Gaussian and Laplace point-spread functions: evaluation, pixel integration,
least-squares fitting and defocus convolution.

Pixel integrals use a corner decomposition.  For a radially symmetric profile
``f(r)`` the integral over the rectangle ``[0, X] x [0, Y]`` (PSF center at the
origin) splits along its diagonal into two right triangles.  Writing
``G(R) = int_0^R f(r) r dr`` (closed form for both kernels), the triangle
with legs ``A`` (along the axis) and ``B`` becomes the smooth 1-D integral

    T(A, B) = int_0^{asinh(B/A)} G(A cosh s) / cosh s  ds,

so the cusp of the Laplace kernel never enters a quadrature rule.  Each
pixel value is an inclusion-exclusion of four corner rectangles; corners are
shared between neighbouring pixels, so a patch costs one 1-D integral pair
per grid corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from . import ParameterError
from .numerics import LmaError, LmaProblem, solve_lma

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
KINDS = (GAUSSIAN, LAPLACE)

_GL_CACHE = {}


def _gauss_legendre(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


@dataclass(frozen=True)
class PsfModel:
    kind: str
    JB: float
    J0: float
    uc: float
    vc: float
    width: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"PSF kind must be one of {KINDS}, got {self.kind!r}")
        if not self.width > 0:
            raise ParameterError("PSF width must be positive")
        if self.J0 < 0 or self.JB < 0:
            raise ParameterError("PSF amplitude and background must be non-negative")

    def replace(self, **kw) -> "PsfModel":
        return replace(self, **kw)

    @property
    def fwhm(self) -> float:
        return fwhm(self.kind, self.width)

    @property
    def total_flux(self) -> float:
        """Integrated signal above background over the whole plane (DN)."""
        return 2.0 * math.pi * self.width**2 * self.J0


def fwhm(kind: str, width: float) -> float:
    if kind == GAUSSIAN:
        return 2.0 * math.sqrt(2.0 * math.log(2.0)) * width
    if kind == LAPLACE:
        return 2.0 * math.log(2.0) * width
    raise ParameterError(f"unknown PSF kind {kind!r}")


def profile(kind: str, r, width: float):
    """Unit-amplitude radial profile."""
    r = np.asarray(r, dtype=float)
    if kind == GAUSSIAN:
        return np.exp(-0.5 * (r / width) ** 2)
    return np.exp(-r / width)


def evaluate(m: PsfModel, u, v):
    """Continuous PSF value (DN) at pixel coordinates ``(u, v)``."""
    r = np.hypot(np.asarray(u, dtype=float) - m.uc, np.asarray(v, dtype=float) - m.vc)
    return m.JB + m.J0 * profile(m.kind, r, m.width)


def _radial_moment(kind: str, R, width: float):
    """G(R) = int_0^R f(r) r dr for the unit-amplitude profile."""
    R = np.asarray(R, dtype=float)
    if kind == GAUSSIAN:
        return -width**2 * np.expm1(-0.5 * (R / width) ** 2)
    x = R / width
    out = np.empty_like(x)
    small = x < 0.05
    xs = x[small]
    # series of 1 - (1 + x) exp(-x) avoids cancellation near the cusp
    out[small] = xs**2 * (0.5 - xs * (1 / 3 - xs * (1 / 8 - xs * (1 / 30 - xs * (1 / 144)))))
    xl = x[~small]
    out[~small] = 1.0 - (1.0 + xl) * np.exp(-xl)
    return width**2 * out


def _triangle(kind: str, A, B, width: float, nodes: int, segments: int):
    """T(A, B) for arrays of non-negative legs (vectorized)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    out = np.zeros(np.broadcast(A, B).shape)
    A, B = np.broadcast_arrays(A, B)
    ok = (A > 1e-14 * width) & (B > 0)
    if not np.any(ok):
        return out
    a = A[ok]
    S = np.arcsinh(B[ok] / a)
    x, w = _gauss_legendre(nodes)
    # composite rule on `segments` equal pieces of [0, S]
    k = np.arange(segments)
    t = ((k[:, None] + 0.5 * (x[None, :] + 1.0)) / segments).ravel()
    wt = np.tile(w, segments) * (0.5 / segments)
    s = S[:, None] * t[None, :]
    c = np.cosh(s)
    vals = _radial_moment(kind, a[:, None] * c, width) / c
    out[ok] = S * (vals @ wt)
    return out


def _corner_integral(kind, X, Y, width, nodes, segments):
    """Signed integral of the unit profile over the rectangle spanned by the
    PSF center and the corner (X, Y)."""
    A = np.abs(X)
    B = np.abs(Y)
    I = _triangle(kind, A, B, width, nodes, segments) + _triangle(kind, B, A, width, nodes, segments)
    return np.sign(X) * np.sign(Y) * I


def render(m: PsfModel, shape: Tuple[int, int], origin: Tuple[int, int] = (0, 0),
           nodes: int = 8, segments: int = 8, exact_gaussian: bool = True) -> np.ndarray:
    """Pixel-integrated PSF on the block of pixels ``origin + [0, shape)``.

    ``origin`` is ``(row0, col0)``; pixel ``(i, j)`` covers
    ``u in [j - 0.5, j + 0.5]`` and ``v in [i - 0.5, i + 0.5]``.
    """
    rows, cols = shape
    r0, c0 = origin
    ue = np.arange(cols + 1) + c0 - 0.5 - m.uc
    ve = np.arange(rows + 1) + r0 - 0.5 - m.vc
    if m.J0 == 0:
        return np.full(shape, float(m.JB))
    if m.kind == GAUSSIAN and exact_gaussian:
        from scipy.special import erf

        s = m.width * math.sqrt(2.0)
        cu = np.diff(erf(ue / s)) * 0.5
        cv = np.diff(erf(ve / s)) * 0.5
        frac = np.outer(cv, cu) * (2.0 * math.pi * m.width**2)
        return m.JB + m.J0 * frac
    X, Y = np.meshgrid(ue, ve)
    F = _corner_integral(m.kind, X, Y, m.width, nodes, segments)
    cell = F[1:, 1:] - F[1:, :-1] - F[:-1, 1:] + F[:-1, :-1]
    return m.JB + m.J0 * cell


def integrate_pixel(m: PsfModel, i: int, j: int, nodes: int = 8, segments: int = 8) -> float:
    """Integral of the PSF over pixel row ``i``, column ``j`` (unit area)."""
    return float(render(m, (1, 1), (i, j), nodes=nodes, segments=segments)[0, 0])


def render_into(image: np.ndarray, m: PsfModel, radius: Optional[int] = None) -> None:
    """Add the pixel-integrated PSF signal (background excluded) to ``image``."""
    if radius is None:
        radius = kernel_radius(m.kind, m.width)
    rows, cols = image.shape
    ic, jc = int(round(m.vc)), int(round(m.uc))
    r0, r1 = max(ic - radius, 0), min(ic + radius + 1, rows)
    c0, c1 = max(jc - radius, 0), min(jc + radius + 1, cols)
    if r0 >= r1 or c0 >= c1:
        return
    image[r0:r1, c0:c1] += render(m.replace(JB=0.0), (r1 - r0, c1 - c0), (r0, c0))


def kernel_radius(kind: str, width: float, tail: float = 1e-4) -> int:
    """Half-size beyond which the profile drops below ``tail`` of its peak."""
    if kind == GAUSSIAN:
        r = width * math.sqrt(-2.0 * math.log(tail))
    else:
        r = -width * math.log(tail)
    return int(math.ceil(r + 0.5))


def kernel(m: PsfModel, tail: float = 1e-4) -> np.ndarray:
    """Unit-sum, pixel-integrated kernel centered on the middle pixel."""
    rad = kernel_radius(m.kind, m.width, tail)
    k = render(PsfModel(m.kind, 0.0, 1.0, 0.0, 0.0, m.width), (2 * rad + 1, 2 * rad + 1), (-rad, -rad))
    return k / k.sum()


def defocus(image, m: PsfModel, tail: float = 1e-4) -> np.ndarray:
    """Convolve with the PSF kernel (unit DC gain, edge-replicated borders)."""
    img = np.asarray(image, dtype=float)
    return ndimage.convolve(img, kernel(m, tail), mode="nearest")


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class PsfFit:
    model: PsfModel
    rms: float
    converged: bool
    degenerate: bool = False
    message: str = ""
    iterations: int = 0


def initial_guess(patch: np.ndarray, kind: str) -> PsfModel:
    border = np.r_[patch[0], patch[-1], patch[1:-1, 0], patch[1:-1, -1]]
    JB = float(np.median(border))
    sig = np.clip(patch - JB, 0, None)
    tot = sig.sum()
    rows, cols = patch.shape
    vv, uu = np.mgrid[0:rows, 0:cols]
    if tot > 0:
        uc, vc = float((sig * uu).sum() / tot), float((sig * vv).sum() / tot)
        var = float((sig * ((uu - uc) ** 2 + (vv - vc) ** 2)).sum() / tot) / 2.0
    else:
        uc, vc, var = (cols - 1) / 2, (rows - 1) / 2, 1.0
    sigma = math.sqrt(max(var - 1 / 12, 0.09))
    width = sigma if kind == GAUSSIAN else sigma / math.sqrt(3.0)
    J0 = max(float(patch.max()) - JB, 1e-6)
    # peak pixel underestimates the amplitude of a narrow profile
    J0 = max(J0, tot / (2 * math.pi * width**2)) if tot > 0 else J0
    return PsfModel(kind, max(JB, 0.0), J0, uc, vc, width)


def fit(patch, kind: str, guess: Optional[PsfModel] = None, max_iter: int = 100) -> PsfFit:
    """Least-squares fit of background, amplitude, center and width.

    Patch coordinates are local: pixel ``(i, j)`` of ``patch`` is centered at
    ``u = j``, ``v = i``.
    """
    patch = np.asarray(patch, dtype=float)
    if patch.ndim != 2 or min(patch.shape) < 7:
        raise ParameterError("PSF patch must be at least 7x7")
    if kind not in KINDS:
        raise ParameterError(f"unknown PSF kind {kind!r}")
    rows, cols = patch.shape
    if np.ptp(patch) == 0.0:
        m = PsfModel(kind, float(max(patch.flat[0], 0.0)), 0.0, (cols - 1) / 2, (rows - 1) / 2, 1.0)
        return PsfFit(m, 0.0, False, True, "constant patch: no signal")
    ip, jp = np.unravel_index(int(np.argmax(patch)), patch.shape)
    if ip in (0, rows - 1) or jp in (0, cols - 1):
        raise ParameterError("PSF peak lies on the patch border")
    g = guess if guess is not None else initial_guess(patch, kind)
    scale = max(g.J0, 1.0)

    def unpack(p):
        return PsfModel(kind, max(p[0] * scale, 0.0), max(p[1] * scale, 0.0), p[2], p[3], math.exp(p[4]))

    def residual(p):
        if abs(p[4]) > 5:
            return np.full(patch.size, 1e6)
        return (render(unpack(p), patch.shape) - patch).ravel() / scale

    x0 = np.array([g.JB / scale, g.J0 / scale, g.uc, g.vc, math.log(g.width)])
    try:
        res = solve_lma(LmaProblem(residual, max_iter=max_iter, xtol=1e-12, ftol=1e-14), x0)
    except LmaError as exc:
        return PsfFit(unpack(x0), float("nan"), False, True, str(exc))
    m = unpack(res.x)
    rms = float(np.sqrt(np.mean((render(m, patch.shape) - patch) ** 2)))
    signal = m.J0 * 2 * math.pi * m.width**2
    degenerate = m.J0 <= 1e-6 * max(abs(m.JB), 1.0) or signal < 1e-9
    return PsfFit(m, rms, res.converged, degenerate, res.message, res.iterations)
