"""Raster primitives: flattening, thresholding, connected components, center
of brightness, normalized cross-correlation, Sobel gradients and scanlines.

Images are 2-D float arrays indexed ``[row, col]``; pixel ``(row, col)`` is
centered at ``u = col``, ``v = row``.  Raw sensor data are 10-bit, so values
of 1023 DN mark saturated pixels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import ParameterError

SATURATION_DN = 1023
MAD_TO_SIGMA = 1.4826
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def as_raster(data) -> np.ndarray:
    """Validate a raw 10-bit frame and widen it to float."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ParameterError("raster must be two-dimensional")
    if arr.size and (arr.min() < 0 or arr.max() > SATURATION_DN):
        raise ParameterError(f"raw raster values must lie in [0, {SATURATION_DN}]")
    return arr.astype(float)


def saturation_mask(raw) -> np.ndarray:
    return np.asarray(raw) >= SATURATION_DN


def flatten(img, window: int = 15) -> np.ndarray:
    """Subtract a median-filtered background and clamp at zero."""
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"median window must be odd and >= 3, got {window}")
    img = np.asarray(img, dtype=float)
    return np.clip(img - median_background(img, window), 0.0, None)


def median_background(img, window: int = 15) -> np.ndarray:
    """Edge-replicated square median filter.

    Integer-valued frames within 12 bits take a histogram-based rank filter
    (identical output, an order of magnitude faster); anything else uses
    the generic sorting filter.
    """
    img = np.asarray(img, dtype=float)
    if img.size and img.min() >= 0 and img.max() < 4096 and np.all(img == np.round(img)):
        from skimage.filters.rank import median

        h = window // 2
        padded = np.pad(img.astype(np.uint16), h, mode="edge")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bg = median(padded, np.ones((window, window), dtype=bool))
        return bg[h:-h, h:-h].astype(float)
    return ndimage.median_filter(img, size=window, mode="nearest")


def robust_sigma(img) -> float:
    """MAD-based noise level.

    On quantized frames whose noise is below one DN most pixels equal the
    median and the MAD is zero; a 4-sigma clipped standard deviation is
    used instead.
    """
    x = np.asarray(img, dtype=float).ravel()
    med = np.median(x)
    s = float(MAD_TO_SIGMA * np.median(np.abs(x - med)))
    if s > 0 or x.size < 2:
        return s
    d = x - med
    s = float(d.std())
    for _ in range(10):
        keep = np.abs(d) <= 4.0 * s
        s_new = float(d[keep].std())
        if s_new == s:
            break
        s = s_new
    return s


def default_threshold(img, k: float = 5.0, floor: float = 1.0) -> float:
    """Median plus ``k`` robust standard deviations, never below ``floor``."""
    x = np.asarray(img, dtype=float)
    return max(float(np.median(x)) + k * robust_sigma(x), floor)


@dataclass
class Blob:
    pixels: np.ndarray  # (n, 2) array of (row, col)
    u: float
    v: float
    total: float
    peak: float
    saturated: bool = False

    @property
    def n(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


def center_of_brightness(values, rows, cols) -> Tuple[float, float]:
    w = np.asarray(values, dtype=float)
    tot = w.sum()
    return float(np.dot(w, cols) / tot), float(np.dot(w, rows) / tot)


def detect_blobs(img, threshold: float, min_pixels: int = 9, raw=None) -> List[Blob]:
    """8-connected components of ``img >= threshold`` with at least
    ``min_pixels`` members, each reduced to its center of brightness.

    ``raw`` (optional) is the unflattened frame used to flag saturation.
    """
    if not threshold > 0:
        raise ParameterError("detection threshold must be positive")
    img = np.asarray(img, dtype=float)
    labels, count = ndimage.label(img >= threshold, structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    sat = saturation_mask(raw) if raw is not None else None
    blobs = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        sub = labels[sl] == k
        rr, cc = np.nonzero(sub)
        if rr.size < min_pixels:
            continue
        rr = rr + sl[0].start
        cc = cc + sl[1].start
        vals = img[rr, cc]
        u, v = center_of_brightness(vals, rr, cc)
        blobs.append(Blob(np.column_stack([rr, cc]), u, v, float(vals.sum()), float(vals.max()),
                          bool(sat[rr, cc].any()) if sat is not None else False))
    return blobs


def extract_point_sources(raw, window: int = 15, k: float = 5.0, min_pixels: int = 9,
                          threshold: Optional[float] = None) -> List[Blob]:
    """Flatten, threshold and centroid: the star-candidate pipeline.

    The default threshold is measured on the background-subtracted frame
    before clamping; half of a clamped noise field is exactly zero, which
    would collapse the robust spread estimate.
    """
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"median window must be odd and >= 3, got {window}")
    raw = np.asarray(raw, dtype=float)
    resid = raw - median_background(raw, window)
    flat = np.clip(resid, 0.0, None)
    thr = default_threshold(resid, k) if threshold is None else threshold
    return detect_blobs(flat, thr, min_pixels, raw=raw)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


def ncc(img, template, chunk_rows: int = 64) -> np.ndarray:
    """Zero-mean normalized cross-correlation over all valid alignments.

    Entry ``[r, c]`` scores the template placed with its top-left pixel on
    image pixel ``(r, c)``.  Windows with zero variance score 0.
    """
    img = np.asarray(img, dtype=float)
    t = np.asarray(template, dtype=float)
    if t.shape[0] > img.shape[0] or t.shape[1] > img.shape[1]:
        raise ParameterError("template larger than image")
    tz = t - t.mean()
    tnorm = np.sqrt(np.sum(tz * tz))
    if tnorm == 0.0 or not np.isfinite(tnorm):
        raise ParameterError("template has zero variance")
    tz = tz / tnorm
    win = sliding_window_view(img, t.shape)
    out = np.empty(win.shape[:2])
    for r0 in range(0, win.shape[0], chunk_rows):
        w = win[r0:r0 + chunk_rows]
        wz = w - w.mean(axis=(2, 3), keepdims=True)
        num = np.einsum("abij,ij->ab", wz, tz)
        den = np.sqrt(np.einsum("abij,abij->ab", wz, wz))
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(den > 0, num / den, 0.0)
        out[r0:r0 + chunk_rows] = np.clip(s, -1.0, 1.0)
    return out


@dataclass
class SubpixelPeak:
    u: float
    v: float
    ok: bool
    message: str = ""


def subpixel_peak(score, peak: Tuple[int, int]) -> SubpixelPeak:
    """Vertex of a least-squares paraboloid through the 3x3 neighbourhood.

    ``peak`` is ``(row, col)``.  Returns ``u`` (column) and ``v`` (row) in
    score-map coordinates; the vertex is clamped to within one pixel of the
    integer peak.  Non-concave fits fall back to the integer peak.
    """
    score = np.asarray(score, dtype=float)
    r, c = peak
    if not (1 <= r < score.shape[0] - 1 and 1 <= c < score.shape[1] - 1):
        raise ParameterError("peak must be interior to the score map")
    yy, xx = np.mgrid[-1:2, -1:2]
    x = xx.ravel().astype(float)
    y = yy.ravel().astype(float)
    A = np.column_stack([np.ones(9), x, y, x * x, x * y, y * y])
    coef = np.linalg.lstsq(A, score[r - 1:r + 2, c - 1:c + 2].ravel(), rcond=None)[0]
    _, b, cc, d, e, f = coef
    H = np.array([[2 * d, e], [e, 2 * f]])
    if not (H[0, 0] < 0 and np.linalg.det(H) > 0):
        return SubpixelPeak(float(c), float(r), False, "non-concave surface; integer peak returned")
    dx, dy = np.linalg.solve(H, -np.array([b, cc]))
    dx = float(np.clip(dx, -1.0, 1.0))
    dy = float(np.clip(dy, -1.0, 1.0))
    return SubpixelPeak(c + dx, r + dy, True)


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------


def sobel(img) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient magnitude and direction (radians, ``atan2(dv, du)``)."""
    img = np.asarray(img, dtype=float)
    gu = ndimage.sobel(img, axis=1, mode="nearest")
    gv = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gu, gv), np.arctan2(gv, gu)


def scanlines(shape, direction, spacing: float = 1.0, step: float = 0.5):
    """Parallel lines crossing the image along unit ``direction`` = (du, dv).

    Yields arrays of (row, col) integer samples ordered along ``direction``.
    """
    d = np.asarray(direction, dtype=float)
    n = np.linalg.norm(d)
    if not np.isclose(n, 1.0, atol=1e-6):
        raise ParameterError("scan direction must be a unit 2-vector")
    rows, cols = shape
    perp = np.array([-d[1], d[0]])
    center = np.array([(cols - 1) / 2.0, (rows - 1) / 2.0])
    half = 0.5 * np.hypot(rows, cols) + 1.0
    offs = np.arange(-half, half + spacing, spacing)
    ts = np.arange(-half, half + step, step)
    for o in offs:
        pts = center + o * perp + ts[:, None] * d
        cc = np.rint(pts[:, 0]).astype(int)
        rr = np.rint(pts[:, 1]).astype(int)
        inside = (cc >= 0) & (cc < cols) & (rr >= 0) & (rr < rows)
        if not inside.any():
            continue
        yield rr[inside], cc[inside]


def scan_illumination(img, direction, threshold: float, spacing: float = 1.0) -> np.ndarray:
    """First pixel above ``threshold`` along each scanline parallel to the
    direction in which light travels across the image.

    Returns an (n, 2) array of unique ``(row, col)`` pixels.
    """
    img = np.asarray(img, dtype=float)
    hits = []
    for rr, cc in scanlines(img.shape, direction, spacing):
        above = np.nonzero(img[rr, cc] > threshold)[0]
        if above.size:
            hits.append((rr[above[0]], cc[above[0]]))
    if not hits:
        return np.empty((0, 2), dtype=int)
    return np.unique(np.array(hits, dtype=int), axis=0)
