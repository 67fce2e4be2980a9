"""Command-line entry point.

Subcommands::

    opnav synth        synthetic images / measurements with truth files
    opnav calibrate    star-based camera calibration from a manifest
    opnav extract      attitudes and body observations from a manifest
    opnav triangulate  simultaneous-observation position fix
    opnav iod          sequential-sighting initial orbit
    opnav od           batch orbit determination

Every command reads an optional JSON config (``--config``); single keys can
be overridden with ``--set key=value`` (value parsed as JSON when possible).
Relative paths in a config file resolve against the file's directory.

Exit codes: 0 success, 2 bad parameters or preconditions, 3 numerical or
geometric failure, 4 file errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import ConvergenceError, DegenerateGeometryError, OpnavError, ParameterError
from .calibration import INTRINSICS, CalibrationImage, CalibrationProblem, calibrate
from .camera import CameraModel, edge_displacement
from .ephemeris import DAY_S, MEAN_RADIUS_KM, EphemerisSet, default_ephemeris
from .imaging import extract_point_sources
from .io import IoError, read_json, read_pgm, write_csv, write_json, write_pgm
from .numerics import unit
from .od import DEFAULT_BODIES, Dynamics, OdMeasurement, OdProblem, SpacecraftState, propagate, refine_iod, solve_batch
from .pipeline import METHODS, ImageRecord, PriorTrajectory, body_positions, extract, los_from_records
from .stars import StarCatalog, match_stars, predict_stars
from .synth import (CAMPAIGN_START_S, DEFAULT_PSF, cruise_state, iod_arc, mercury_mars_geometry, od_campaign,
                    random_attitude, small_rotation, synth_block, synth_starfield, tune_exposure)
from .triangulation import (LosObservation, mahalanobis, triangulate_dlt, triangulate_lost, triangulate_midpoint,
                            triangulate_mle)

log = logging.getLogger("opnav")

EXIT_OK, EXIT_PARAM, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
PATH_KEYS = ("camera", "catalog", "ephemeris", "manifest", "observations", "reference", "guess")
TRIANGULATION_METHODS = ("lost+ltof", "lost", "dlt", "midpoint", "mle")
SCENARIOS = ("block", "mercury-mars", "calibration", "campaign", "iod-arc")
DEFAULT_DISTORTION = {"k1": 0.4, "p1": -2e-3, "p2": 1.5e-3}


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve(value, base: Path):
    if value is None:
        return None
    if isinstance(value, list):
        return [_resolve(v, base) for v in value]
    if isinstance(value, dict):
        return value
    p = Path(value)
    return p if p.is_absolute() else base / p


@dataclass
class RunConfig:
    """Parameters of one command run.

    Path-valued keys (``camera``, ``catalog``, ``ephemeris``, ``manifest``,
    ``observations``, ``reference``, ``guess``) are resolved to absolute
    paths and must exist.
    """

    params: dict = field(default_factory=dict)
    out: Path = Path("opnav_out")
    seed: int = 0
    threads: int = 1
    method: Optional[str] = None
    plots: bool = True

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        params = {}
        if args.config:
            cfg_path = Path(args.config)
            raw = read_json(cfg_path)
            if not isinstance(raw, dict):
                raise ParameterError(f"{cfg_path}: config must be a JSON object")
            base = cfg_path.resolve().parent
            params = {k: (_resolve(v, base) if k in PATH_KEYS else v) for k, v in raw.items()}
        for item in args.set or []:
            if "=" not in item:
                raise ParameterError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            v = _parse_value(v)
            params[k] = _resolve(v, Path.cwd()) if k in PATH_KEYS else v
        for k in PATH_KEYS:
            for p in np.atleast_1d(np.asarray(params.get(k) or [], dtype=object)):
                if isinstance(p, Path) and not p.exists():
                    raise IoError(f"{k}: file not found: {p}")
        seed = args.seed if args.seed is not None else int(params.get("seed", 0))
        if seed < 0 or seed >= 2**64:
            raise ParameterError("--seed must be an unsigned 64-bit integer")
        threads = args.threads if args.threads is not None else int(params.get("threads", 1))
        if threads < 1:
            raise ParameterError("--threads must be at least 1")
        out = Path(args.out) if args.out else Path(params.get("out", "opnav_out"))
        return cls(params, out, seed, threads, args.method or params.get("method"), not args.no_plots)

    def get(self, key, default=None):
        return self.params.get(key, default)

    def camera(self, fallback: Optional[dict] = None) -> CameraModel:
        if self.get("camera") is not None:
            return _load(CameraModel.from_dict, self.get("camera"))
        if fallback is not None:
            return CameraModel.from_dict(fallback)
        return CameraModel.default()

    def catalog(self) -> StarCatalog:
        p = self.get("catalog")
        return StarCatalog.load(p) if p is not None else StarCatalog.bundled()

    def ephemeris(self) -> EphemerisSet:
        p = self.get("ephemeris")
        return EphemerisSet.load(p) if p is not None else default_ephemeris()

    def dynamics(self, eph: EphemerisSet) -> Dynamics:
        return Dynamics(eph, tuple(self.get("bodies", DEFAULT_BODIES)), bool(self.get("srp", True)))

    def output(self, name: str) -> Path:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create output directory {self.out}: {exc}") from exc
        return self.out / name


def _load(factory, path):
    try:
        return factory(read_json(path))
    except (KeyError, TypeError) as exc:
        raise IoError(f"{path}: missing or malformed field {exc}") from exc


def _state_dict(epoch, r, v, beta=None) -> dict:
    d = {"epoch_s": float(epoch), "r_km": np.asarray(r, float).tolist(), "v_km_s": np.asarray(v, float).tolist()}
    if beta is not None:
        d["beta_srp_m2_kg"] = float(beta)
    return d


def _read_state(obj) -> dict:
    """Epoch-tagged state from a state file, an IOD solution or IOD output."""
    d = read_json(obj) if isinstance(obj, Path) else dict(obj)
    if "refined" in d or "linear" in d:
        d = d.get("refined") or d["linear"]
    if "r0_km" in d:
        d = {"epoch_s": d["t0"], "r_km": d["r0_km"], "v_km_s": d["v0_km_s"]}
    if "r_km" not in d or "v_km_s" not in d:
        raise ParameterError("state needs r_km and v_km_s")
    return d


def _emit(**items) -> None:
    for k, v in items.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k}: {v}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _write_scenes(cfg: RunConfig, scenes, targets_by_id, prior: dict, reference: dict, camera: CameraModel,
                  truth_camera: Optional[CameraModel] = None) -> None:
    (cfg.out / "images").mkdir(parents=True, exist_ok=True)
    (cfg.out / "truth").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in scenes:
        write_pgm(cfg.out / "images" / f"{s.image_id}.pgm", s.image)
        write_json(cfg.out / "images" / f"{s.image_id}.json", s.metadata())
        write_json(cfg.out / "truth" / f"{s.image_id}.json", s.truth())
        entries.append({"raster": f"images/{s.image_id}.pgm", "meta": f"images/{s.image_id}.json",
                        "truth": f"truth/{s.image_id}.json", "targets": list(targets_by_id.get(s.image_id, []))})
    camera.save(cfg.output("camera.json"))
    manifest = {"camera": "camera.json", "prior": prior, "reference": "reference.json", "images": entries}
    if truth_camera is not None:
        truth_camera.save(cfg.output("truth_camera.json"))
        manifest["truth_camera"] = "truth_camera.json"
    write_json(cfg.output("reference.json"), reference)
    write_json(cfg.output("manifest.json"), manifest)
    if cfg.plots:
        from .plotting import image_marks

        for s in scenes:
            if s.exposure_label == "short" and s.bodies:
                marks = [{"u": b["u"], "v": b["v"], "label": b["body"]} for b in s.bodies]
                image_marks(cfg.output(f"synth_{s.image_id}.png"), s.image, marks, f"{s.image_id} (truth)",
                            window=max(40, int(3 * max(b["radius_px"] for b in s.bodies))))


def _perturbed_prior(cfg: RunConfig, rng, epoch, r, v) -> dict:
    dr = float(cfg.get("prior_error_km", 0.0))
    dv = float(cfg.get("prior_error_km_s", 0.0))
    r = np.asarray(r, float) + (rng.normal(0.0, dr, 3) if dr > 0 else 0.0)
    v = np.asarray(v, float) + (rng.normal(0.0, dv, 3) if dv > 0 else 0.0)
    return _state_dict(epoch, r, v)


def _synth_blocks(cfg: RunConfig, scenario: str) -> None:
    eph, cat, cam = cfg.ephemeris(), cfg.catalog(), cfg.camera()
    rng = np.random.default_rng(cfg.seed)
    epoch = float(cfg.get("epoch_s", CAMPAIGN_START_S + 30 * DAY_S))
    psf = DEFAULT_PSF
    kw = {"pattern": cfg.get("pattern", "LSSSL"), "gap_s": float(cfg.get("gap_s", 10.0)),
          "drift_arcsec_s": float(cfg.get("drift_arcsec_s", 4.0)), "noise": bool(cfg.get("noise", True)),
          "body_jitter_px": cfg.get("body_jitter_px")}
    if scenario == "mercury-mars":
        targets = ["mercury", "mars"]
        r, v = mercury_mars_geometry(eph, epoch, float(cfg.get("separation_deg", 5.0)),
                                     float(cfg.get("mercury_range_au", 1.0)))
        kw["boresight"] = unit(unit(eph.position("mercury", epoch) - r) + unit(eph.position("mars", epoch) - r))
        kw["pointing_offset"] = float(cfg.get("pointing_offset", 0.0))
    else:
        targets = list(cfg.get("targets", ["jupiter"]))
        if "state" in cfg.params:
            st = _read_state(cfg.get("state"))
            r, v = np.asarray(st["r_km"], float), np.asarray(st["v_km_s"], float)
        else:
            st = cruise_state(eph, epoch)
            r, v = st.r, st.v
        kw["pointing_offset"] = float(cfg.get("pointing_offset", 0.005))
    n_blocks = int(cfg.get("n_blocks", 1))
    spacing = float(cfg.get("block_spacing_s", 3600.0))
    exposure = tune_exposure(psf)
    scenes, targets_by_id = [], {}
    for k in range(n_blocks):
        dt = k * spacing
        blk = synth_block(cam, eph, cat, targets, epoch + dt, r + v * dt, v, rng, psf, exposure,
                          block_id=f"b{k:02d}", **kw)
        for s in blk:
            targets_by_id[s.image_id] = targets
        scenes += blk
    prior = _perturbed_prior(cfg, rng, epoch, r, v)
    _write_scenes(cfg, scenes, targets_by_id, prior, _state_dict(epoch, r, v), cam)
    _emit(scenario=scenario, images=len(scenes), targets=",".join(targets), out=str(cfg.out))


def _synth_calibration(cfg: RunConfig) -> None:
    eph, cat, cam = cfg.ephemeris(), cfg.catalog(), cfg.camera()
    rng = np.random.default_rng(cfg.seed)
    dist = dict(DEFAULT_DISTORTION, **cfg.get("distortion", {}))
    truth = cam.replace(dx=float(cfg.get("truth_dx", cam.dx)), dy=float(cfg.get("truth_dx", cam.dx)), **dist)
    n = int(cfg.get("n_images", 6))
    err = math.radians(float(cfg.get("attitude_error_arcsec", 30.0)) / 3600.0)
    epoch = float(cfg.get("epoch_s", CAMPAIGN_START_S))
    st = cruise_state(eph, epoch)
    exposure = tune_exposure(DEFAULT_PSF)
    noise = bool(cfg.get("noise", True))
    scenes = []
    for i in range(n):
        att = random_attitude(rng)
        t = epoch + 60.0 * i
        scenes.append(synth_starfield(att, t, st.r + st.v * 60.0 * i, st.v, cat, truth, DEFAULT_PSF, exposure,
                                      rng if noise else None, commanded=small_rotation(rng, err) @ att,
                                      image_id=f"cal{i:02d}"))
    _write_scenes(cfg, scenes, {}, _state_dict(epoch, st.r, st.v), _state_dict(epoch, st.r, st.v), cam, truth)
    _emit(scenario="calibration", images=n, edge_displacement_px=edge_displacement(truth),
          stars=sum(len(s.star_ids) for s in scenes), out=str(cfg.out))


def _measurement_record(m: OdMeasurement, k: int, los: Optional[LosObservation] = None, v_obs=None) -> dict:
    rec = dict(m.to_dict(), image_id=f"m{k:03d}", method="synthetic", attitude_source="truth", warning="")
    if los is not None:
        rec["los"] = los.to_dict()
    if v_obs is not None:
        rec["observer_velocity_km_s"] = np.asarray(v_obs, float).tolist()
    return rec


def _synth_campaign(cfg: RunConfig) -> None:
    cam = cfg.camera()
    eph = cfg.ephemeris()
    camp = od_campaign(seed=cfg.seed, camera=cam, dynamics=cfg.dynamics(eph),
                       days=float(cfg.get("days", 97.0)))
    mix = cfg.get("mix", "all")
    if mix not in ("all", "planets"):
        raise ParameterError("mix must be 'all' or 'planets'")
    meas = camp.planets + (camp.earth_moon if mix == "all" else [])
    meas = sorted(meas, key=lambda m: m.epoch)
    rng = np.random.default_rng([cfg.seed, 1])
    dr, dv = float(cfg.get("guess_error_km", 5.0e4)), float(cfg.get("guess_error_km_s", 1e-3))
    guess = _state_dict(camp.t0, camp.truth.r + rng.normal(0.0, dr, 3), camp.truth.v + rng.normal(0.0, dv, 3),
                        float(cfg.get("beta_guess", 0.01)))
    write_json(cfg.output("observations.json"),
               {"camera": cam.to_dict(), "observations": [_measurement_record(m, k) for k, m in enumerate(meas)]})
    write_json(cfg.output("reference.json"), _state_dict(camp.t0, camp.truth.r, camp.truth.v, camp.truth.beta_srp))
    write_json(cfg.output("guess.json"), guess)
    _emit(scenario="campaign", mix=mix, measurements=len(meas), out=str(cfg.out))


def _synth_iod_arc(cfg: RunConfig) -> None:
    cam = cfg.camera()
    eph = cfg.ephemeris()
    arc = iod_arc(seed=cfg.seed, noise=bool(cfg.get("noise", True)), camera=cam, dynamics=cfg.dynamics(eph),
                  start_day=float(cfg.get("start_day", 65.0)))
    recs = [_measurement_record(m, k, o, v) for k, (m, o, v) in
            enumerate(zip(arc.measurements, arc.observations, arc.velocities))]
    write_json(cfg.output("observations.json"), {"camera": cam.to_dict(), "observations": recs})
    write_json(cfg.output("reference.json"), _state_dict(arc.t0, arc.truth.r, arc.truth.v, arc.truth.beta_srp))
    _emit(scenario="iod-arc", sightings=len(recs), out=str(cfg.out))


def cmd_synth(cfg: RunConfig) -> int:
    scenario = cfg.get("scenario", "block")
    if scenario not in SCENARIOS:
        raise ParameterError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if scenario in ("block", "mercury-mars"):
        _synth_blocks(cfg, scenario)
    elif scenario == "calibration":
        _synth_calibration(cfg)
    elif scenario == "campaign":
        _synth_campaign(cfg)
    else:
        _synth_iod_arc(cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    path: Path
    data: dict

    @classmethod
    def load(cls, cfg: RunConfig) -> "Manifest":
        p = cfg.get("manifest")
        if p is None:
            raise ParameterError("a manifest is required (config key 'manifest')")
        data = read_json(p)
        if not isinstance(data, dict) or "images" not in data:
            raise IoError(f"{p}: not an image manifest")
        return cls(Path(p), data)

    def file(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.path.parent / p

    def records(self) -> List[ImageRecord]:
        out = []
        for e in self.data["images"]:
            meta = dict(read_json(self.file(e["meta"])))
            meta["targets"] = list(e.get("targets", []))
            out.append(ImageRecord(read_pgm(self.file(e["raster"])), meta))
        return out

    def camera(self, cfg: RunConfig) -> CameraModel:
        if cfg.get("camera") is not None or "camera" not in self.data:
            return cfg.camera()
        return _load(CameraModel.from_dict, self.file(self.data["camera"]))

    def prior(self) -> PriorTrajectory:
        if "prior" not in self.data:
            raise ParameterError("manifest carries no a-priori trajectory ('prior')")
        return PriorTrajectory.from_dict(self.data["prior"])


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def cmd_calibrate(cfg: RunConfig) -> int:
    man = Manifest.load(cfg)
    records = [r for r in man.records() if r.label == "long"]
    if len(records) < 2:
        raise ParameterError(f"calibration needs at least two star images, manifest has {len(records)}")
    cam = man.camera(cfg)
    cat = cfg.catalog()
    prior = man.prior()
    mag = float(cfg.get("mag_limit", 6.5))
    gate = float(cfg.get("gate_px", 15.0))
    tol = float(cfg.get("median_tol_px", 12.0))
    images = []
    for rec in records:
        r, v = prior.at(rec.epoch)
        blobs = [b for b in extract_point_sources(rec.image) if not b.saturated]
        pred = predict_stars(cat, cam, rec.commanded, rec.epoch, r, v, mag, margin=-5.0)
        try:
            m = match_stars(np.array([b.uv for b in blobs]).reshape(-1, 2), pred.uv, pred.ids, gate=gate,
                            median_tol=tol)
        except OpnavError as exc:
            log.warning("image %s skipped: %s", rec.image_id, exc)
            continue
        k = {int(i): a for a, i in enumerate(pred.ids)}
        dirs = pred.directions[[k[int(i)] for i in m.ids]]
        images.append(CalibrationImage(rec.image_id, m.measured, dirs, rec.commanded, rec.epoch, v, m.ids))
    free = tuple(cfg.get("free", INTRINSICS))
    problem = CalibrationProblem(images, free)
    res = calibrate(problem, cam)
    res.camera.save(cfg.output("camera.json"))
    summary = dict(res.to_dict(), images=[im.image_id for im in images],
                   sigma={n: res.sigma(n) for n in res.parameter_names if n in INTRINSICS})
    write_json(cfg.output("calibration.json"), summary)
    pre = np.linalg.norm(res.pre_residuals, axis=1)
    post = np.linalg.norm(res.post_residuals, axis=1)
    rows = [{"image_id": images[int(i)].image_id, "star_id": int(s), "radius_px": float(rad),
             "pre_px": float(a), "post_px": float(b)}
            for i, s, rad, a, b in zip(res.image_index, res.star_ids, res.radius, pre, post)]
    write_csv(cfg.output("residuals.csv"), rows, ["image_id", "star_id", "radius_px", "pre_px", "post_px"])
    if cfg.plots:
        from .plotting import calibration_residuals

        calibration_residuals(cfg.output("residuals.png"), res.radius, pre, post)
    _emit(images=len(images), stars=len(rows), pre_rms_px=res.pre.rms, post_rms_px=res.post.rms,
          dx=res.camera.dx, k1=res.camera.k1, p1=res.camera.p1, p2=res.camera.p2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def cmd_extract(cfg: RunConfig) -> int:
    man = Manifest.load(cfg)
    method = cfg.method or "cob"
    if method not in METHODS:
        raise ParameterError(f"unknown centroid method {method!r}; choose from {METHODS}")
    records = man.records()
    cam = man.camera(cfg)
    prior = man.prior()
    res = extract(records, cam, cfg.catalog(), cfg.ephemeris(), prior, cfg.get("targets"), method,
                  sigma=cfg.get("sigma"), mag_limit=float(cfg.get("mag_limit", 6.5)), threads=cfg.threads)
    doc = dict(res.to_dict(), camera=cam.to_dict(), prior=man.data["prior"], method=method)
    write_json(cfg.output("observations.json"), doc)
    cols = ["image_id", "epoch", "body", "method", "u", "v", "sigma_u", "attitude_source", "warning"]
    write_csv(cfg.output("observations.csv"), res.observations, cols)
    if cfg.plots:
        from .plotting import image_marks

        by_id = {r.image_id: r for r in records}
        for iid in sorted({o["image_id"] for o in res.observations}):
            obs = [o for o in res.observations if o["image_id"] == iid]
            marks = [{"u": o["u"], "v": o["v"], "label": o["body"]} for o in obs]
            R = max(o["details"].get("radius_px", 0.0) for o in obs)
            image_marks(cfg.output(f"extract_{iid}.png"), by_id[iid].image, marks, f"{iid} ({method})",
                        window=max(40, int(3 * R)))
    _emit(images=len(records), attitudes=len(res.attitudes), observations=len(res.observations),
          failures=len(res.failures))
    return EXIT_OK


# ---------------------------------------------------------------------------
# observation files
# ---------------------------------------------------------------------------


@dataclass
class ObservationSet:
    records: List[dict]
    camera: Optional[dict]
    prior: Optional[dict]

    @classmethod
    def load(cls, cfg: RunConfig) -> "ObservationSet":
        paths = cfg.get("observations")
        if paths is None:
            raise ParameterError("observation file(s) required (config key 'observations')")
        recs, cam, prior = [], None, None
        for p in np.atleast_1d(np.asarray(paths, dtype=object)):
            d = read_json(p)
            if not isinstance(d, dict) or "observations" not in d:
                raise IoError(f"{p}: not an observation file")
            recs += d["observations"]
            cam = cam or d.get("camera")
            prior = prior or d.get("prior")
        ids = cfg.get("image_ids")
        if ids is not None:
            recs = [r for r in recs if r.get("image_id") in set(ids)]
        bodies = cfg.get("only_bodies")
        if bodies is not None:
            recs = [r for r in recs if r.get("body") in set(bodies)]
        recs.sort(key=lambda r: (float(r["epoch"]), str(r.get("image_id", "")), r["body"]))
        return cls(recs, cam, prior)

    def los(self) -> List[LosObservation]:
        missing = [r.get("image_id", "?") for r in self.records if "los" not in r]
        if missing:
            raise ParameterError(f"records without line-of-sight data: {missing[:5]}")
        return los_from_records(self.records)

    def measurements(self) -> List[OdMeasurement]:
        return [OdMeasurement.from_dict(r) for r in self.records]


def _reference_state(cfg: RunConfig) -> Optional[dict]:
    ref = cfg.get("reference")
    return None if ref is None else _read_state(ref)


# ---------------------------------------------------------------------------
# triangulate
# ---------------------------------------------------------------------------


def cmd_triangulate(cfg: RunConfig) -> int:
    method = cfg.method or "lost+ltof"
    if method not in TRIANGULATION_METHODS:
        raise ParameterError(f"unknown triangulation method {method!r}; choose from {TRIANGULATION_METHODS}")
    data = ObservationSet.load(cfg)
    if method == "midpoint" and len(data.records) != 2:
        raise ParameterError(f"the midpoint method takes exactly two observations, got {len(data.records)}")
    obs = data.los()
    eph = cfg.ephemeris()
    t = float(np.mean([o.epoch for o in obs]))
    if method == "lost+ltof":
        p, vel = body_positions(data.records, eph)
        sol = triangulate_lost(obs, p, body_velocities=vel)
    else:
        if data.prior is not None:
            observer = PriorTrajectory.from_dict(data.prior).at(t)[0]
        else:
            p, vel = body_positions(data.records, eph)
            observer = triangulate_lost(obs, p, body_velocities=vel, covariance=False).r
        p, _ = body_positions(data.records, eph, observer=observer)
        solver = {"lost": triangulate_lost, "dlt": triangulate_dlt, "midpoint": triangulate_midpoint,
                  "mle": triangulate_mle}[method]
        sol = solver(obs, p)
    ifov = obs[0].ifov
    out = {"method": method, "epoch_s": t, "n_observations": len(obs), "solution": sol.to_dict(),
           "sqrt_trace_P_km": sol.total_error}
    ref = _reference_state(cfg)
    r_ref = None
    if ref is not None:
        r_ref = PriorTrajectory.from_dict(ref).at(t)[0]
        out["reference_r_km"] = r_ref.tolist()
        out["error_km"] = float(np.linalg.norm(sol.r - r_ref))
        out["mahalanobis"] = mahalanobis(sol, r_ref) if sol.P is not None else None
    write_json(cfg.output("triangulation.json"), out)
    px = sol.residuals_px(ifov)
    rows = [{"image_id": r.get("image_id", ""), "epoch": float(r["epoch"]), "body": r["body"],
             "du": float(d[0]), "dv": float(d[1]), "sigma": float(r["sigma_u"])} for r, d in zip(data.records, px)]
    write_csv(cfg.output("residuals.csv"), rows, ["image_id", "epoch", "body", "du", "dv", "sigma"])
    if cfg.plots:
        from .plotting import position_solutions

        position_solutions(cfg.output("triangulation.png"),
                           [{"label": method, "r_km": sol.r, "P_km2": sol.P}], r_ref)
    _emit(method=method, observations=len(obs), sqrt_trace_P_km=sol.total_error,
          **({"error_km": out["error_km"], "mahalanobis": out["mahalanobis"]} if ref is not None else {}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# iod
# ---------------------------------------------------------------------------


def _propagated(ref: dict, t: float, dyn: Dynamics) -> SpacecraftState:
    s = SpacecraftState(ref["r_km"], ref["v_km_s"], ref.get("beta_srp_m2_kg", 0.0))
    t_ref = float(ref.get("epoch_s", t))
    return s if t_ref == t else propagate(s, t_ref, t, dyn)


def cmd_iod(cfg: RunConfig) -> int:
    from .triangulation import iod_linear

    method = cfg.method or "refined"
    if method not in ("linear", "refined"):
        raise ParameterError("iod method must be 'linear' or 'refined'")
    data = ObservationSet.load(cfg)
    obs = data.los()
    eph = cfg.ephemeris()
    t0 = float(cfg.get("t0", min(o.epoch for o in obs)))
    p, _ = body_positions(data.records, eph)
    lin = iod_linear(obs, p, t0)
    out = {"t0": t0, "n_sightings": len(obs), "linear": lin.to_dict()}
    rows = []
    dyn = cfg.dynamics(eph)
    ref_state = None
    ref = _reference_state(cfg)
    if ref is not None:
        ref_state = _propagated(ref, t0, dyn)
        out["linear_error"] = {"r_km": float(np.linalg.norm(lin.r0 - ref_state.r)),
                               "v_km_s": float(np.linalg.norm(lin.v0 - ref_state.v))}
    if method == "refined":
        rf = refine_iod(lin, obs, dyn, max_iter=int(cfg.get("max_iter", 50)))
        out["refined"] = rf.solution.to_dict()
        out["improvement"] = rf.improvement
        out["batch"] = rf.batch.to_dict()
        rows = rf.batch.residual_table()
        if ref_state is not None:
            e = {"r_km": float(np.linalg.norm(rf.solution.r0 - ref_state.r)),
                 "v_km_s": float(np.linalg.norm(rf.solution.v0 - ref_state.v))}
            out["refined_error"] = e
            out["position_gain"] = out["linear_error"]["r_km"] / max(e["r_km"], 1e-300)
            out["velocity_gain"] = out["linear_error"]["v_km_s"] / max(e["v_km_s"], 1e-300)
        if cfg.plots:
            from .plotting import cost_history

            cost_history(cfg.output("iod_cost.png"), rf.batch.cost_history, "Refinement cost")
    write_json(cfg.output("iod.json"), out)
    cols = ["epoch", "body", "du_pre", "dv_pre", "du_post", "dv_post", "sigma_u"]
    write_csv(cfg.output("residuals.csv"), rows, cols)
    _emit(method=method, sightings=len(obs), **{k: out[k][kk] for k, kk in
                                                (("linear_error", "r_km"), ("refined_error", "r_km")) if k in out})
    return EXIT_OK


# ---------------------------------------------------------------------------
# od
# ---------------------------------------------------------------------------


def cmd_od(cfg: RunConfig) -> int:
    data = ObservationSet.load(cfg)
    if cfg.get("guess") is None:
        raise ParameterError("an initial state is required (config key 'guess')")
    g = _read_state(cfg.get("guess"))
    cam = CameraModel.from_dict(data.camera) if (cfg.get("camera") is None and data.camera) else cfg.camera()
    eph = cfg.ephemeris()
    dyn = cfg.dynamics(eph)
    t0 = float(g.get("epoch_s", data.records[0]["epoch"] if data.records else 0.0))
    beta = float(cfg.get("beta_srp", g.get("beta_srp_m2_kg", 0.0)))
    guess = SpacecraftState(g["r_km"], g["v_km_s"], beta)
    problem = OdProblem(data.measurements(), cam, dyn, t0=t0, estimate_beta=bool(cfg.get("estimate_beta", True)),
                        aberration=bool(cfg.get("aberration", True)), light_time=bool(cfg.get("light_time", True)))
    sol = solve_batch(problem, guess, max_iter=int(cfg.get("max_iter", 50)))
    if not sol.converged:
        raise ConvergenceError(f"batch estimator did not converge: {sol.message}")
    out = {"solution": sol.to_dict(), "n_measurements": len(problem.measurements),
           "sigma": {n: sol.sigma(n) for n in sol.parameter_names}}
    ref = _reference_state(cfg)
    if ref is not None:
        rs = _propagated(ref, t0, dyn)
        d = sol.state.r - rs.r
        out["position_error_km"] = float(np.linalg.norm(d))
        out["position_error_earth_radii"] = out["position_error_km"] / MEAN_RADIUS_KM["earth"]
        out["velocity_error_km_s"] = float(np.linalg.norm(sol.state.v - rs.v))
        P = sol.covariance[:3, :3]
        out["mahalanobis"] = float(math.sqrt(d @ np.linalg.solve(P, d)))
    write_json(cfg.output("od.json"), out)
    rows = [dict(epoch=r["epoch"], body=r["body"], du=r["du_post"], dv=r["dv_post"], sigma=r["sigma_u"],
                 du_pre=r["du_pre"], dv_pre=r["dv_pre"]) for r in sol.residual_table()]
    write_csv(cfg.output("residuals.csv"), rows, ["epoch", "body", "du", "dv", "sigma", "du_pre", "dv_pre"])
    if cfg.plots:
        from .plotting import od_residuals

        od_residuals(cfg.output("residuals.png"), sol.residual_table(), t0)
    _emit(measurements=len(rows), post_rms_px=sol.post_rms_px, mean_zero=sol.mean_zero(),
          **({"position_error_km": out["position_error_km"]} if ref is not None else {}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {"synth": cmd_synth, "calibrate": cmd_calibrate, "extract": cmd_extract,
            "triangulate": cmd_triangulate, "iod": cmd_iod, "od": cmd_od}


HELP = {"synth": "write synthetic images or measurements with truth",
        "calibrate": "estimate camera intrinsics from star images",
        "extract": "star attitudes and body observations from images",
        "triangulate": "position from simultaneous lines of sight",
        "iod": "initial orbit from sequential sightings",
        "od": "batch orbit determination from pixel centroids"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opnav", description="Optical navigation from planet and star images.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
        p.add_argument("--threads", type=int, help="worker threads for per-image work")
        p.add_argument("--method", help="centroid / triangulation / IOD method")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.from_args(args)
        return COMMANDS[args.command](cfg)
    except IoError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except np.linalg.LinAlgError as exc:  # a ValueError subclass
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (ParameterError, KeyError, TypeError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_PARAM
    except (DegenerateGeometryError, ConvergenceError, OpnavError, ArithmeticError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
