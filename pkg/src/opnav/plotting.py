"""PNG figures for command outputs.

Figures are drawn on the Agg canvas directly (no pyplot state), so they are
safe to produce from worker threads and byte-stable for fixed inputs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Ellipse

from .io import IoError

DPI = 100
_META = {"Software": None}
_COLORS = {"mercury": "tab:gray", "venus": "tab:olive", "earth": "tab:blue", "moon": "tab:purple",
           "mars": "tab:red", "jupiter": "tab:orange", "saturn": "tab:brown"}


def _figure(w=6.4, h=4.0, nrows=1, ncols=1, **kw):
    fig = Figure(figsize=(w, h), dpi=DPI)
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False, **kw)
    return fig, axes


def _save(fig, path) -> None:
    fig.tight_layout()
    try:
        fig.savefig(path, dpi=DPI, metadata=_META)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def calibration_residuals(path, radius, pre, post, title: str = "Star residuals vs. radius") -> None:
    """Residual magnitude against distance from the principal point,
    before and after calibration."""
    fig, ax = _figure()
    ax = ax[0, 0]
    ax.scatter(radius, pre, s=6, c="tab:red", label="pre-calibration")
    ax.scatter(radius, post, s=6, c="tab:blue", label="post-calibration")
    ax.set_xlabel("radial distance from principal point [px]")
    ax.set_ylabel("residual [px]")
    ax.set_title(title)
    ax.legend(loc="upper left")
    ax.grid(alpha=0.3)
    _save(fig, path)


def image_marks(path, image, marks: Sequence[dict] = (), title: str = "", window: Optional[int] = None,
                vmax: Optional[float] = None) -> None:
    """Image with measured / predicted points.

    ``marks`` hold ``u``, ``v`` and optional ``label`` and ``color``.  With
    ``window`` the view is cropped to that half-size around the first mark.
    """
    img = np.asarray(image, dtype=float)
    fig, ax = _figure(6.4, 5.2)
    ax = ax[0, 0]
    lo = float(np.median(img))
    hi = vmax if vmax is not None else float(np.percentile(img, 99.95))
    ax.imshow(img, cmap="gray", origin="upper", vmin=lo, vmax=max(hi, lo + 1.0), interpolation="nearest")
    for m in marks:
        ax.plot(m["u"], m["v"], "+", ms=10, mew=1.2, color=m.get("color", "tab:red"))
        if m.get("label"):
            ax.annotate(m["label"], (m["u"], m["v"]), xytext=(6, 6), textcoords="offset points",
                        color=m.get("color", "tab:red"), fontsize=8)
    if window and marks:
        u0, v0 = marks[0]["u"], marks[0]["v"]
        ax.set_xlim(u0 - window, u0 + window)
        ax.set_ylim(v0 + window, v0 - window)
    ax.set_xlabel("u [px]")
    ax.set_ylabel("v [px]")
    ax.set_title(title)
    _save(fig, path)


def od_residuals(path, rows: Sequence[dict], t0: float = 0.0, title: str = "Measurement residuals") -> None:
    """Pre- and post-fit pixel residuals against time, one color per body.

    ``rows`` are residual-table records (``epoch``, ``body``, ``du_pre``,
    ``dv_pre``, ``du_post``, ``dv_post``, ``sigma_u``).
    """
    fig, axes = _figure(7.2, 5.6, 2, 2, sharex=True)
    days = np.array([(float(r["epoch"]) - t0) / 86400.0 for r in rows])
    bodies = [r["body"] for r in rows]
    for col, stage in enumerate(("pre", "post")):
        for row, comp in enumerate(("du", "dv")):
            ax = axes[row, col]
            y = np.array([float(r[f"{comp}_{stage}"]) for r in rows])
            for b in sorted(set(bodies)):
                k = np.array([x == b for x in bodies])
                ax.scatter(days[k], y[k], s=10, color=_COLORS.get(b, "k"), label=b)
            ax.axhline(0.0, color="k", lw=0.5)
            ax.set_ylabel(f"{comp} [px]")
            ax.grid(alpha=0.3)
            if row == 0:
                ax.set_title(f"{stage}-fit")
            else:
                ax.set_xlabel("days from epoch")
    axes[0, 1].legend(loc="upper right", fontsize=7)
    fig.suptitle(title)
    _save(fig, path)


def cost_history(path, costs: Sequence[float], title: str = "Solver cost") -> None:
    fig, ax = _figure(5.0, 3.5)
    ax = ax[0, 0]
    c = np.maximum(np.asarray(costs, dtype=float), 1e-300)
    ax.semilogy(np.arange(len(c)), c, "o-")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cost")
    ax.set_title(title)
    ax.grid(alpha=0.3, which="both")
    _save(fig, path)


def _ellipse(ax, center, cov, n_sigma=1.0, **kw):
    w, v = np.linalg.eigh(cov)
    w = np.sqrt(np.maximum(w, 0.0))
    ang = np.degrees(np.arctan2(v[1, 1], v[0, 1]))
    ax.add_patch(Ellipse(center, 2 * n_sigma * w[1], 2 * n_sigma * w[0], angle=ang, fill=False, **kw))


def position_solutions(path, solutions: Sequence[dict], reference=None, title: str = "Position solutions") -> None:
    """Solutions with 1σ ellipses in the x-y and x-z planes relative to
    ``reference`` (or to the first solution).

    Each entry holds ``label``, ``r_km`` and optionally ``P_km2``.
    """
    origin = np.asarray(reference if reference is not None else solutions[0]["r_km"], dtype=float)
    fig, axes = _figure(8.0, 4.0, 1, 2)
    for ax, (i, j, name) in zip(axes[0], ((0, 1, "y"), (0, 2, "z"))):
        for k, s in enumerate(solutions):
            d = (np.asarray(s["r_km"], dtype=float) - origin) / 1e3
            c = f"C{k}"
            ax.plot(d[i], d[j], "o", color=c, label=s.get("label", ""))
            if s.get("P_km2") is not None:
                P = np.asarray(s["P_km2"], dtype=float)[np.ix_([i, j], [i, j])] / 1e6
                _ellipse(ax, (d[i], d[j]), P, color=c)
        if reference is not None:
            ax.plot(0.0, 0.0, "k*", ms=10, label="reference")
        ax.set_xlabel("x [1000 km]")
        ax.set_ylabel(f"{name} [1000 km]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(alpha=0.3)
    axes[0, 0].legend(fontsize=7)
    fig.suptitle(title)
    _save(fig, path)
