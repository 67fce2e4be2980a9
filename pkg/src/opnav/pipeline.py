"""End-to-end measurement extraction and estimation drivers.

Images come with a metadata sidecar (epoch, exposure label, commanded
attitude).  Long exposures give star attitudes; short exposures give body
centroids whose attitude is bracketed between neighbouring star frames.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import DegenerateGeometryError, OpnavError, ParameterError
from .bodies import (LUNAR_LAMBERT, RenderSpec, limb_to_los, locate_limb, locate_ncc,
                     photocenter_correct, photocenter_offset)
from .camera import CameraModel, ObserverState, deaberrate
from .ephemeris import MEAN_RADIUS_KM, EphemerisSet
from .imaging import default_threshold, detect_blobs, extract_point_sources
from .numerics import Rotation, unit
from .psf import PsfModel
from .stars import AttitudeSolution, StarCatalog, attitude_from_image, bracket_attitude
from .synth import DEFAULT_PSF, PLANET_SIGMA_PX, earth_moon_sigma
from .triangulation import LosObservation

log = logging.getLogger(__name__)

METHODS = ("cob", "cob+photocenter", "ncc", "limb")
MAX_BRACKET_S = 120.0


@dataclass
class ImageRecord:
    image: np.ndarray
    meta: dict

    @property
    def epoch(self) -> float:
        return float(self.meta["epoch_s"])

    @property
    def image_id(self) -> str:
        return str(self.meta.get("image_id", ""))

    @property
    def label(self) -> str:
        return str(self.meta.get("exposure_label", "long"))

    @property
    def commanded(self) -> Rotation:
        return Rotation.from_quat(self.meta["commanded_quaternion"])


@dataclass
class PriorTrajectory:
    """Rectilinear a-priori spacecraft motion used for aberration, light
    time and centroid predictions."""

    epoch: float
    r: np.ndarray
    v: np.ndarray

    def at(self, t: float):
        return self.r + self.v * (t - self.epoch), self.v

    @classmethod
    def from_dict(cls, d: dict) -> "PriorTrajectory":
        return cls(float(d["epoch_s"]), np.asarray(d["r_km"], float), np.asarray(d["v_km_s"], float))


def default_sigma(body: str, radius_px: float) -> float:
    if body in PLANET_SIGMA_PX:
        return PLANET_SIGMA_PX[body]
    if radius_px >= 1.0:
        return earth_moon_sigma(radius_px)
    return 0.5


@dataclass
class Extraction:
    attitudes: Dict[str, dict] = field(default_factory=dict)
    observations: List[dict] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"attitudes": self.attitudes, "observations": self.observations, "failures": self.failures}


def star_attitudes(records: Sequence[ImageRecord], camera: CameraModel, catalog: StarCatalog,
                   prior: PriorTrajectory, mag_limit: float = 6.5, threads: int = 1) -> Dict[str, AttitudeSolution]:
    """Attitude of every long exposure (failures are logged and skipped)."""
    longs = [r for r in records if r.label == "long"]

    def one(rec: ImageRecord):
        r, v = prior.at(rec.epoch)
        blobs = extract_point_sources(rec.image)
        uv = np.array([b.uv for b in blobs if not b.saturated]).reshape(-1, 2)
        return attitude_from_image(uv, catalog, camera, rec.commanded, rec.epoch, r, v, mag_limit)

    out = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        futures = [(rec, ex.submit(one, rec)) for rec in longs]
        for rec, fut in futures:
            try:
                out[rec.image_id] = fut.result()
            except OpnavError as exc:
                log.warning("image %s: attitude failed: %s", rec.image_id, exc)
    return out


def attitude_for(rec: ImageRecord, solved: Dict[str, AttitudeSolution], records: Sequence[ImageRecord]):
    """Bracketed attitude when star frames exist on both sides, otherwise
    the nearest one-sided star attitude, otherwise the commanded one."""
    if rec.image_id in solved:
        return solved[rec.image_id].attitude, "stars", ""
    t = rec.epoch
    cands = [(r.epoch, solved[r.image_id]) for r in records if r.image_id in solved
             and abs(r.epoch - t) <= MAX_BRACKET_S]
    before = [c for c in cands if c[0] <= t]
    after = [c for c in cands if c[0] >= t]
    if before and after:
        b = max(before, key=lambda c: c[0])[1]
        a = min(after, key=lambda c: c[0])[1]
        return bracket_attitude(b, a, t), "bracketed", ""
    if cands:
        near = min(cands, key=lambda c: abs(c[0] - t))[1]
        return near.attitude, "one-sided", "attitude bracketing not possible; nearest star frame used"
    return rec.commanded, "commanded", "no star attitude available; commanded attitude used"


def body_geometry(camera: CameraModel, eph: EphemerisSet, body: str, t: float, r, v,
                  attitude: Rotation) -> RenderSpec:
    """Predicted render geometry of ``body`` (aberration applied to its
    center direction)."""
    from .camera import aberrate

    lt = eph.light_time_corrected_state(body, t, r)
    rel = lt.position - np.asarray(r, float)
    app = aberrate(unit(rel), v) * np.linalg.norm(rel)
    sun = eph.position("sun", t - lt.delta_t)
    return RenderSpec.from_geometry(camera, attitude, np.zeros(3), app, app + (sun - lt.position),
                                    MEAN_RADIUS_KM[body], LUNAR_LAMBERT)


def locate_body(img: np.ndarray, camera: CameraModel, spec: RenderSpec, body: str, attitude: Rotation,
                v_obs, method: str, psf: PsfModel = DEFAULT_PSF, gate_px: float = 40.0) -> dict:
    """Centroid (or limb line of sight) of one body in a short exposure."""
    if method not in METHODS:
        raise ParameterError(f"unknown centroid method {method!r}; choose from {METHODS}")
    bg = float(np.median(img))
    flat = np.clip(img - bg, 0.0, None)
    thr = default_threshold(img - bg)
    pred = spec.center_uv
    blobs = detect_blobs(flat, thr, min_pixels=1)
    near = [b for b in blobs if math.hypot(b.u - pred[0], b.v - pred[1]) <= gate_px + spec.apparent_radius]
    if not near:
        raise DegenerateGeometryError(f"{body}: no bright region within {gate_px:.0f} px of the prediction")
    blob = max(near, key=lambda b: b.total)
    cob = blob.uv
    R = spec.apparent_radius
    out = {"cob_u": float(cob[0]), "cob_v": float(cob[1]), "radius_px": R, "phase_rad": spec.phase}
    if method == "cob":
        uv = cob
    elif method == "cob+photocenter":
        d = -spec.sun_image_dir
        uv = photocenter_correct(cob, R, spec.phase, d) if np.linalg.norm(d) > 0 else cob
        out["photocenter_offset_px"] = photocenter_offset(R, spec.phase)
    elif method == "ncc":
        loc = locate_ncc(flat, spec.moved_to(cob), psf)
        uv = loc.uv
        out.update(ncc_score=loc.score, low_confidence=loc.low_confidence)
    else:
        # seed the limb search at the photocenter-corrected COB; the raw
        # COB sits up to ~0.6 R sunward of the disk center
        c0 = photocenter_correct(cob, R, spec.phase, -spec.sun_image_dir)
        # work in a window so the threshold is set by the disk, not the sky
        h = int(math.ceil(2.0 * R)) + 10
        r0, col0 = max(int(round(c0[1])) - h, 0), max(int(round(c0[0])) - h, 0)
        win = flat[r0:int(round(c0[1])) + h + 1, col0:int(round(c0[0])) + h + 1]
        off = np.array([col0, r0], dtype=float)
        pts = locate_limb(win, spec.sun_image_dir, c0 - off, R)
        ll = limb_to_los(pts.uv + off, spec.body_radius_km, camera, attitude)
        # the limb cone gives the apparent (aberrated) direction of the center
        e = deaberrate(ll.los_inertial, v_obs)
        uv, _ = camera.project(e, ObserverState(np.asarray(v_obs, float), attitude))
        out.update(limb_points=int(ll.n_points), limb_arc_deg=ll.arc_deg, limb_rms_px=ll.rms_px,
                   range_km=ll.range_km, warning=ll.warning)
    out["u"], out["v"] = float(uv[0]), float(uv[1])
    return out


def extract(records: Sequence[ImageRecord], camera: CameraModel, catalog: StarCatalog, eph: EphemerisSet,
            prior: PriorTrajectory, bodies: Optional[Sequence[str]] = None, method: str = "cob",
            psf: PsfModel = DEFAULT_PSF, sigma: Optional[Dict[str, float]] = None,
            mag_limit: float = 6.5, threads: int = 1) -> Extraction:
    """Attitudes for star frames and body observations for short frames."""
    if method not in METHODS:
        raise ParameterError(f"unknown centroid method {method!r}; choose from {METHODS}")
    records = sorted(records, key=lambda r: (r.epoch, r.image_id))
    res = Extraction()
    solved = star_attitudes(records, camera, catalog, prior, mag_limit, threads)
    for rec in records:
        if rec.label == "long" and rec.image_id not in solved:
            res.failures.append({"image_id": rec.image_id, "stage": "attitude", "error": "star attitude failed"})
    for k, a in solved.items():
        res.attitudes[k] = a.to_dict()
    for rec in records:
        if rec.label != "short":
            continue
        att, source, warn = attitude_for(rec, solved, records)
        if warn:
            log.warning("image %s: %s", rec.image_id, warn)
        r, v = prior.at(rec.epoch)
        targets = list(bodies or rec.meta.get("targets", []))
        if not targets:
            res.failures.append({"image_id": rec.image_id, "stage": "targets", "error": "no target bodies"})
        for body in targets:
            try:
                spec = body_geometry(camera, eph, body, rec.epoch, r, v, att)
                m = "limb" if method == "limb" and spec.apparent_radius >= 4.0 else method
                if m == "limb" or m == "ncc":
                    if spec.apparent_radius < 1.0:
                        m = "cob"
                loc = locate_body(rec.image, camera, spec, body, att, v, m, psf)
                s = (sigma or {}).get(body, default_sigma(body, spec.apparent_radius))
                los = LosObservation.from_pixel(camera, loc["u"], loc["v"], att, s, rec.epoch, body,
                                                observer_velocity=v)
                res.observations.append({
                    "image_id": rec.image_id, "epoch": rec.epoch, "body": body, "method": m,
                    "u": loc["u"], "v": loc["v"], "sigma_u": s,
                    "quaternion_xyzw": att.as_quat().tolist(), "attitude_source": source,
                    "warning": warn, "observer_velocity_km_s": np.asarray(v).tolist(),
                    "los": los.to_dict(), "details": {k: loc[k] for k in loc if k not in ("u", "v")}})
            except OpnavError as exc:
                log.warning("image %s, %s: %s", rec.image_id, body, exc)
                res.failures.append({"image_id": rec.image_id, "body": body, "stage": "centroid", "error": str(exc)})
    return res


def los_from_records(obs: Sequence[dict]) -> List[LosObservation]:
    return [LosObservation.from_dict(o["los"]) for o in obs]


def body_positions(obs: Sequence[dict], eph: EphemerisSet, observer=None, light_time: bool = True):
    """Body positions per observation: at light emission when an observer
    position estimate is given, else at capture; plus capture velocities."""
    p, vel = [], []
    for o in obs:
        t, b = float(o["epoch"]), o["body"]
        pos, v = eph.state(b, t)
        if light_time and observer is not None:
            pos = eph.light_time_corrected_state(b, t, observer).position
        p.append(pos)
        vel.append(v)
    return np.array(p), np.array(vel)
