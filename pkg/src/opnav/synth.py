"""Synthetic scene oracle: calibration star sets, rendered star fields and
planet images, exposure/magnitude model and image-block generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ParameterError
from . import psf as psfmod
from .bodies import LUNAR_LAMBERT, RenderSpec, render_sphere
from .calibration import CalibrationImage
from .camera import CameraModel, ObserverState, aberrate, deaberrate
from .ephemeris import AU_KM, DAY_S, GM, MEAN_RADIUS_KM, EphemerisSet, default_ephemeris
from .imaging import SATURATION_DN, extract_point_sources
from .numerics import Rotation, unit
from .od import Dynamics, OdMeasurement, SpacecraftState, propagate, propagate_many
from .psf import PsfModel
from .stars import StarCatalog, predict_stars


def random_attitude(rng: np.random.Generator) -> Rotation:
    q = rng.normal(size=4)
    return Rotation(q / np.linalg.norm(q))


def small_rotation(rng: np.random.Generator, sigma: float) -> Rotation:
    return Rotation.from_rotvec(rng.normal(0.0, sigma, 3))


def calibration_set(camera: CameraModel, n_images: int = 6, stars_per_image: int = 40,
                    noise_px: float = 0.0, attitude_error: float = 0.0, seed: int = 0,
                    velocity=(0.0, 0.0, 0.0), margin: float = 3.0,
                    central_fraction: float = 1.0) -> List[CalibrationImage]:
    """Star observations generated through ``camera`` with known truth.

    Stars are uniform over the sensor (or over the central
    ``central_fraction`` of each axis); the a-priori attitude is the truth
    perturbed by ``attitude_error`` rad per axis.  Each image also carries
    its true attitude as ``truth`` for test use.
    """
    rng = np.random.default_rng(seed)
    v = np.asarray(velocity, dtype=float)
    out = []
    hu = (camera.cols - 1) / 2.0 * central_fraction
    hv = (camera.rows - 1) / 2.0 * central_fraction
    cu, cv = (camera.cols - 1) / 2.0, (camera.rows - 1) / 2.0
    for i in range(n_images):
        att = random_attitude(rng)
        uv = np.column_stack([rng.uniform(max(cu - hu, margin), min(cu + hu, camera.cols - 1 - margin), stars_per_image),
                              rng.uniform(max(cv - hv, margin), min(cv + hv, camera.rows - 1 - margin), stars_per_image)])
        b = camera.unproject(uv[:, 0], uv[:, 1])
        e = deaberrate(att.inv().apply(b), v)
        meas = uv + rng.normal(0.0, noise_px, uv.shape) if noise_px > 0 else uv
        prior = small_rotation(rng, attitude_error) @ att if attitude_error > 0 else att
        im = CalibrationImage(f"img{i:03d}", meas, e, prior, 0.0, v, np.arange(stars_per_image) + 1000 * i)
        im.truth = att
        out.append(im)
    return out


# ---------------------------------------------------------------------------
# cruise scenario: heliocentric departure from the Earth-Moon system
# ---------------------------------------------------------------------------

CAMPAIGN_START_S = 19 * DAY_S
CAMPAIGN_DAYS = 97.0
PLANET_SIGMA_PX = {"mercury": 0.75, "mars": 0.75, "jupiter": 0.5, "saturn": 0.25}
PLANET_COUNTS = {"mercury": 1, "mars": 1, "jupiter": 8, "saturn": 7}


def cruise_state(eph: Optional[EphemerisSet] = None, t: float = CAMPAIGN_START_S,
                 distance_km: float = 2.0e6, departure_km_s: float = 0.55,
                 beta_srp: float = 0.012) -> SpacecraftState:
    """Spacecraft leaving the Earth-Moon system: ``distance_km`` from the
    Earth, receding at ``departure_km_s`` in the Earth's trailing direction
    tilted outward."""
    eph = eph or default_ephemeris()
    pe, ve = eph.state("earth", t)
    trail = unit(-unit(ve) + 0.35 * unit(pe) + 0.1 * unit(np.cross(pe, ve)))
    return SpacecraftState(pe + distance_km * trail, ve + departure_km_s * trail, beta_srp)


def pointing_attitude(los, rng: np.random.Generator, offset_rad: float = 0.0) -> Rotation:
    """Attitude placing inertial ``los`` near the boresight with a random
    roll and a random off-axis displacement of up to ``offset_rad``."""
    roll = rng.uniform(0.0, 2 * np.pi)
    att = Rotation.align_boresight(unit(los), roll)
    if offset_rad > 0:
        ang = rng.uniform(0.0, 2 * np.pi)
        mag = offset_rad * np.sqrt(rng.uniform())
        att = Rotation.from_rotvec([mag * np.cos(ang), mag * np.sin(ang), 0.0]) @ att
    return att


def observe(camera: CameraModel, eph: EphemerisSet, body: str, t: float, r_sc, v_sc, sigma_u: float,
            rng: np.random.Generator, offset_rad: float = 0.01, aberration: bool = True,
            light_time: bool = True, noise: bool = True) -> OdMeasurement:
    """Pixel centroid of ``body`` seen from the spacecraft state.

    The centroid gets N(0, sigma_u) noise unless ``noise`` is False; sigma_u
    is kept on the measurement as its weight either way.
    """
    if light_time:
        p = eph.light_time_corrected_state(body, t, r_sc).position
    else:
        p = eph.position(body, t)
    e = unit(p - np.asarray(r_sc, float))
    vel = np.asarray(v_sc, float) if aberration else np.zeros(3)
    att = pointing_attitude(aberrate(e, vel), rng, offset_rad)
    uv, ok = camera.project(e, ObserverState(vel, att))
    if not ok:
        raise ParameterError("body behind the camera")
    if noise:
        uv = uv + rng.normal(0.0, sigma_u, 2)
    return OdMeasurement(t, body, uv, att, sigma_u)


def apparent_radius_px(camera: CameraModel, body: str, rng_km: float) -> float:
    return camera.dx * np.tan(np.arcsin(min(MEAN_RADIUS_KM[body] / rng_km, 1.0)))


def earth_moon_sigma(radius_px: float) -> float:
    """0.25 px for small disks rising linearly to 1 px at 17.5 px radius."""
    return float(np.clip(0.25 + 0.75 * (radius_px - 1.0) / 16.5, 0.25, 1.0))


@dataclass
class Campaign:
    truth: SpacecraftState
    t0: float
    planets: List[OdMeasurement]
    earth_moon: List[OdMeasurement]
    dynamics: Dynamics
    camera: CameraModel

    def truth_states(self, times) -> np.ndarray:
        return propagate_many(self.truth, self.t0, times, self.dynamics)[0]


def od_campaign(seed: int = 0, camera: Optional[CameraModel] = None, dynamics: Optional[Dynamics] = None,
                days: float = CAMPAIGN_DAYS, n_earth: int = 21, n_moon: int = 21) -> Campaign:
    """Synthetic 97-day optical campaign: 1 Mercury, 1 Mars, 8 Jupiter and 7
    Saturn centroids plus Earth and Moon centroids, with noise levels set
    per target (Earth/Moon by apparent size)."""
    rng = np.random.default_rng(seed)
    cam = camera or CameraModel.default()
    dyn = dynamics or Dynamics(default_ephemeris())
    eph = dyn.eph
    t0 = CAMPAIGN_START_S
    truth = cruise_state(eph, t0)
    span = days * DAY_S
    planet_times = []
    for body, n in PLANET_COUNTS.items():
        planet_times += [(body, t) for t in t0 + np.sort(rng.uniform(0.0, span, n))]
    em_times = [("earth", t) for t in t0 + np.linspace(0.0, span, n_earth) + rng.uniform(0, 0.2 * DAY_S, n_earth)]
    em_times += [("moon", t) for t in t0 + np.linspace(0.0, span, n_moon) + rng.uniform(0.3, 0.6, n_moon) * DAY_S]
    # t0 is the first measurement epoch
    planet_times[0] = (planet_times[0][0], t0)
    em_times = [(b, min(t, t0 + span)) for b, t in em_times]
    all_t = np.array([t for _, t in planet_times + em_times])
    states = propagate_many(truth, t0, all_t, dyn)[0]
    meas = []
    for (body, t), s in zip(planet_times + em_times, states):
        if body in PLANET_SIGMA_PX:
            sig = PLANET_SIGMA_PX[body]
        else:
            d = np.linalg.norm(eph.position(body, t) - s[:3])
            sig = earth_moon_sigma(apparent_radius_px(cam, body, d))
        meas.append(observe(cam, eph, body, t, s[:3], s[3:], sig, rng))
    k = len(planet_times)
    return Campaign(truth, t0, meas[:k], meas[k:], dyn, cam)


IOD_ARC_BODIES = ("saturn", "jupiter", "saturn", "jupiter")
IOD_ARC_DAYS = (0.0, 3.5, 9.0, 13.0)


@dataclass
class SightingArc:
    truth: SpacecraftState
    t0: float
    measurements: List[OdMeasurement]
    observations: list  # LosObservation, aberration removed with the true velocity
    velocities: np.ndarray


def iod_arc(seed: int = 0, noise: bool = True, camera: Optional[CameraModel] = None,
            dynamics: Optional[Dynamics] = None, start_day: float = 65.0,
            bodies: Sequence[str] = IOD_ARC_BODIES, days: Sequence[float] = IOD_ARC_DAYS) -> SightingArc:
    """Sequential planet sightings over ~two weeks of the cruise trajectory,
    for initial orbit determination."""
    from .triangulation import LosObservation

    if len(bodies) != len(days):
        raise ParameterError("one sighting day per body is required")
    rng = np.random.default_rng(seed)
    cam = camera or CameraModel.default()
    dyn = dynamics or Dynamics(default_ephemeris())
    x = cruise_state(dyn.eph)
    t0 = CAMPAIGN_START_S + start_day * DAY_S
    s0 = propagate(x, CAMPAIGN_START_S, t0, dyn)
    truth = SpacecraftState(s0.r, s0.v, x.beta_srp)
    times = t0 + np.asarray(days, dtype=float) * DAY_S
    states = propagate_many(truth, t0, times, dyn)[0]
    meas, obs = [], []
    for b, t, st in zip(bodies, times, states):
        m = observe(cam, dyn.eph, b, t, st[:3], st[3:], PLANET_SIGMA_PX.get(b, 0.5), rng, noise=noise)
        meas.append(m)
        obs.append(LosObservation.from_pixel(cam, m.uv[0], m.uv[1], m.attitude, m.sigma_u, t, b,
                                             observer_velocity=st[3:]))
    return SightingArc(truth, t0, meas, obs, states[:, 3:])


# ---------------------------------------------------------------------------
# exposure and magnitude response
# ---------------------------------------------------------------------------

# nominal apparent magnitudes, used only to set rendered brightness
BODY_MAGNITUDE = {"mercury": 0.0, "venus": -4.0, "earth": -3.5, "moon": -2.0, "mars": 1.0,
                  "jupiter": -2.85, "saturn": 0.7}
EXPOSURE_LABELS = ("long", "short")
DEFAULT_PSF = PsfModel(psfmod.LAPLACE, 0.0, 1.0, 0.0, 0.0, 0.72)


@dataclass(frozen=True)
class ExposureModel:
    """Linear detector response: ``DN = background + gain * 10**(-0.4 (m - zero_point))``
    spread by the PSF, plus Gaussian read noise, clamped at saturation."""

    gain: float = 1.0
    zero_point: float = 0.0
    read_noise: float = 0.5
    background: float = 20.0
    saturation: float = float(SATURATION_DN)
    label: str = "long"
    gain_label: str = "high"

    def __post_init__(self):
        if not self.gain > 0:
            raise ParameterError("exposure gain must be positive")
        if self.read_noise < 0:
            raise ParameterError("read noise must be non-negative")
        if self.label not in EXPOSURE_LABELS:
            raise ParameterError(f"exposure label must be one of {EXPOSURE_LABELS}")

    def star_flux(self, mag) -> np.ndarray:
        """Integrated DN of a point source of magnitude ``mag``."""
        return self.gain * 10.0 ** (-0.4 * (np.asarray(mag, dtype=float) - self.zero_point))

    def magnitude(self, flux_dn) -> np.ndarray:
        return self.zero_point - 2.5 * np.log10(np.asarray(flux_dn, dtype=float) / self.gain)

    def expose(self, signal, rng: Optional[np.random.Generator] = None, quantize: bool = False) -> np.ndarray:
        img = self.background + np.asarray(signal, dtype=float)
        if rng is not None and self.read_noise > 0:
            img = img + rng.normal(0.0, self.read_noise, img.shape)
        img = np.clip(img, 0.0, self.saturation)
        return np.round(img) if quantize else img

    def scaled(self, factor: float, label: str = "short", gain_label: str = "low") -> "ExposureModel":
        return replace(self, gain=self.gain * factor, label=label, gain_label=gain_label)

    def to_dict(self) -> dict:
        return {"gain": self.gain, "zero_point": self.zero_point, "read_noise": self.read_noise,
                "background": self.background, "saturation": self.saturation, "label": self.label,
                "gain_label": self.gain_label}

    @classmethod
    def from_dict(cls, d: dict) -> "ExposureModel":
        return cls(**d)


def phase_profiles(psf: PsfModel, n_phase: int = 8) -> np.ndarray:
    """Sorted (descending) pixel values of a unit-flux star over an
    ``n_phase``² grid of sub-pixel positions; shape ``(n_phase**2, npix)``."""
    rad = psfmod.kernel_radius(psf.kind, psf.width) + 1
    offs = (np.arange(n_phase) + 0.5) / n_phase - 0.5
    out = []
    for du in offs:
        for dv in offs:
            img = psfmod.render(psf_for_flux(psf, du, dv, 1.0), (2 * rad + 1, 2 * rad + 1), (-rad, -rad))
            out.append(np.sort(img.ravel())[::-1])
    return np.array(out)


def detection_probability(snr_flux, profiles: np.ndarray, k: float = 5.0, min_pixels: int = 9) -> float:
    """Phase-averaged chance that the ``min_pixels`` brightest pixels of a
    star with flux ``snr_flux`` (in read-noise units) all clear ``k`` sigma."""
    from scipy.special import ndtr

    z = profiles[:, :min_pixels] * snr_flux - k
    return float(np.mean(np.prod(ndtr(z), axis=1)))


def tune_exposure(psf: PsfModel = DEFAULT_PSF, m_sat: float = 2.5, m_det: float = 7.5, k: float = 5.0,
                  min_pixels: int = 9, background: float = 20.0) -> ExposureModel:
    """Exposure in which half of all ``m_sat`` stars saturate and half of all
    ``m_det`` stars are detected, averaged over sub-pixel phase.

    Saturation uses the median peak-pixel fraction; detection requires the
    ``min_pixels`` brightest pixels above ``k`` sigma of read noise.
    """
    from scipy.optimize import brentq

    if not m_det > m_sat:
        raise ParameterError("the detection magnitude must be fainter than the saturation magnitude")
    prof = phase_profiles(psf)
    gain = (SATURATION_DN - background) / (np.median(prof[:, 0]) * 10.0 ** (-0.4 * m_sat))
    x = brentq(lambda f: detection_probability(f, prof, k, min_pixels) - 0.5, k, 1e6 * k)
    sigma = gain * 10.0 ** (-0.4 * m_det) / x
    return ExposureModel(gain=float(gain), read_noise=float(sigma), background=background)


def psf_for_flux(psf: PsfModel, u: float, v: float, flux: float) -> PsfModel:
    return PsfModel(psf.kind, 0.0, flux / (2 * math.pi * psf.width**2), u, v, psf.width)


@dataclass
class DynamicRange:
    magnitudes: np.ndarray
    detected: np.ndarray      # fraction of injected stars detected
    saturated: np.ndarray     # fraction of injected stars detected with a saturated pixel
    faintest_detected: float
    brightest_unsaturated: float

    @property
    def delta_m(self) -> float:
        return self.faintest_detected - self.brightest_unsaturated


def measure_dynamic_range(exposure: ExposureModel, psf: PsfModel = DEFAULT_PSF, seed: int = 0,
                          magnitudes=None, per_mag: int = 24, tile: int = 32, k: float = 5.0,
                          min_pixels: int = 9) -> DynamicRange:
    """Brightest unsaturated and faintest detected magnitude through the
    detection pipeline.

    For each magnitude ``per_mag`` stars at random sub-pixel phases are
    rendered on a grid of tiles, exposed and run through
    :func:`extract_point_sources`.  The faint end is the faintest magnitude
    detected at least half the time; the bright end the brightest magnitude
    whose detections are saturated less than half the time.
    """
    rng = np.random.default_rng(seed)
    if magnitudes is None:
        magnitudes = np.round(np.r_[np.arange(1.5, 3.5, 0.05), np.arange(6.5, 8.5, 0.05)], 3)
    mags = np.asarray(magnitudes, dtype=float)
    ncol = int(math.ceil(math.sqrt(per_mag)))
    nrow = int(math.ceil(per_mag / ncol))
    det = np.zeros(len(mags))
    sat = np.zeros(len(mags))
    for a, m in enumerate(mags):
        sig = np.zeros((nrow * tile, ncol * tile))
        truth = []
        for n in range(per_mag):
            r, c = divmod(n, ncol)
            u = c * tile + tile // 2 + rng.uniform(-0.5, 0.5)
            v = r * tile + tile // 2 + rng.uniform(-0.5, 0.5)
            psfmod.render_into(sig, psf_for_flux(psf, u, v, float(exposure.star_flux(m))))
            truth.append((u, v))
        raw = exposure.expose(sig, rng)
        blobs = extract_point_sources(raw, k=k, min_pixels=min_pixels)
        hits = nsat = 0
        for u, v in truth:
            near = [b for b in blobs if math.hypot(b.u - u, b.v - v) < 2.0]
            if near:
                hits += 1
                nsat += any(b.saturated for b in near)
        det[a] = hits / per_mag
        sat[a] = nsat / per_mag
    ok = det >= 0.5
    faint = float(mags[ok].max()) if ok.any() else float("nan")
    clean = ok & (sat < 0.5 * np.maximum(det, 1e-12))
    bright = float(mags[clean].min()) if clean.any() else float("nan")
    return DynamicRange(mags, det, sat, faint, bright)


# ---------------------------------------------------------------------------
# rendered scenes
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    image: np.ndarray
    epoch: float
    attitude: Rotation
    commanded: Rotation
    r_sc: np.ndarray
    v_sc: np.ndarray
    exposure: ExposureModel
    image_id: str = "scene"
    star_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    star_uv: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    star_mag: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bodies: List[dict] = field(default_factory=list)

    @property
    def exposure_label(self) -> str:
        return self.exposure.label

    def metadata(self) -> dict:
        """Sidecar record of what the spacecraft would downlink."""
        return {"epoch_s": float(self.epoch), "exposure_label": self.exposure.label,
                "commanded_quaternion": self.commanded.as_quat().tolist(),
                "gain_label": self.exposure.gain_label, "image_id": self.image_id}

    def truth(self) -> dict:
        return {"image_id": self.image_id, "epoch_s": float(self.epoch),
                "attitude_quaternion": self.attitude.as_quat().tolist(),
                "r_km": np.asarray(self.r_sc, float).tolist(), "v_km_s": np.asarray(self.v_sc, float).tolist(),
                "exposure": self.exposure.to_dict(),
                "stars": [{"id": int(i), "u": float(uv[0]), "v": float(uv[1]), "mag": float(m)}
                          for i, uv, m in zip(self.star_ids, self.star_uv, self.star_mag)],
                "bodies": [dict(b) for b in self.bodies]}


def body_truth(camera: CameraModel, eph: EphemerisSet, body: str, t: float, r_sc, v_sc,
               attitude: Rotation) -> dict:
    """Projected center, apparent radius and lighting of ``body``."""
    r_sc = np.asarray(r_sc, dtype=float)
    lt = eph.light_time_corrected_state(body, t, r_sc)
    rel = lt.position - r_sc
    rng_km = float(np.linalg.norm(rel))
    uv, ok = camera.project(unit(rel), ObserverState(np.asarray(v_sc, float), attitude))
    sun = eph.position("sun", t - lt.delta_t) if "sun" in eph else np.zeros(3)
    phase = float(np.arccos(np.clip(unit(sun - lt.position) @ unit(-rel), -1.0, 1.0)))
    return {"body": body, "u": float(uv[0]), "v": float(uv[1]), "in_front": bool(ok),
            "range_km": rng_km, "radius_px": apparent_radius_px(camera, body, rng_km),
            "phase_rad": phase, "emission_position_km": lt.position.tolist(),
            "light_time_s": float(lt.delta_t)}


def _add_body(signal: np.ndarray, camera: CameraModel, eph: EphemerisSet, info: dict, t: float,
              r_sc, v_sc, attitude: Rotation, psf: PsfModel, flux: float, shift=(0.0, 0.0)) -> None:
    u, v = info["u"] + shift[0], info["v"] + shift[1]
    if info["radius_px"] < 1.0:
        psfmod.render_into(signal, psf_for_flux(psf, u, v, flux))
        return
    # sphere placed along the aberrated direction so it lands on the projected center
    p = np.asarray(info["emission_position_km"])
    rel = p - np.asarray(r_sc, float)
    app = aberrate(unit(rel), np.asarray(v_sc, float)) * np.linalg.norm(rel)
    sun = eph.position("sun", t - info["light_time_s"])
    spec = RenderSpec.from_geometry(camera, attitude, np.zeros(3), app, app + (sun - p),
                                    MEAN_RADIUS_KM[info["body"]], LUNAR_LAMBERT)
    if shift[0] or shift[1]:
        spec = spec.moved_to(spec.center_uv + np.asarray(shift, float))
    h = int(math.ceil(spec.extent_px + psfmod.kernel_radius(psf.kind, psf.width))) + 3
    r0, c0 = int(round(v)) - h, int(round(u)) - h
    win = render_sphere(spec, (2 * h + 1, 2 * h + 1), (r0, c0))
    total = win.sum()
    if total <= 0:
        return
    win = psfmod.defocus(win * (flux / total), psf)
    rows, cols = signal.shape
    rr0, cc0 = max(r0, 0), max(c0, 0)
    rr1, cc1 = min(r0 + win.shape[0], rows), min(c0 + win.shape[1], cols)
    if rr0 < rr1 and cc0 < cc1:
        signal[rr0:rr1, cc0:cc1] += win[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]


def synth_starfield(attitude: Rotation, epoch: float, r_sc, v_sc, catalog: StarCatalog, camera: CameraModel,
                    psf: PsfModel = DEFAULT_PSF, exposure: Optional[ExposureModel] = None,
                    rng: Optional[np.random.Generator] = None, bodies: Sequence[str] = (),
                    eph: Optional[EphemerisSet] = None, commanded: Optional[Rotation] = None,
                    image_id: str = "scene", mag_limit: Optional[float] = None,
                    body_flux: Optional[Dict[str, float]] = None,
                    body_jitter_px: Optional[Dict[str, float]] = None) -> SyntheticScene:
    """Render catalog stars (and optionally bodies) seen with ``attitude``.

    Star directions carry proper motion, parallax and aberration; each star
    is a pixel-integrated PSF with flux from its magnitude.  ``rng=None``
    gives a noiseless frame.  Bodies use light-time-corrected positions and
    render as point sources below 1 px apparent radius, as lunar-Lambert
    spheres otherwise; ``body_flux`` overrides their integrated DN.
    ``body_jitter_px`` renders a body displaced by N(0, sigma) px per axis
    from its truth center (drawn from ``rng``), standing in for unmodelled
    centroiding error; the truth record keeps the undisplaced center.
    """
    exposure = exposure or ExposureModel()
    r_sc = np.asarray(r_sc, dtype=float)
    v_sc = np.asarray(v_sc, dtype=float)
    signal = np.zeros((camera.rows, camera.cols))
    rad = psfmod.kernel_radius(psf.kind, psf.width)
    pred = predict_stars(catalog, camera, attitude, epoch, r_sc, v_sc, mag_limit=mag_limit, margin=-rad)
    for u, v, m in zip(pred.uv[:, 0], pred.uv[:, 1], pred.mag):
        psfmod.render_into(signal, psf_for_flux(psf, u, v, float(exposure.star_flux(m))), rad)
    inside = camera.in_bounds(pred.uv) if len(pred.ids) else np.zeros(0, bool)
    infos = []
    if bodies:
        eph = eph or default_ephemeris()
        for b in bodies:
            info = body_truth(camera, eph, b, epoch, r_sc, v_sc, attitude)
            if not info["in_front"]:
                continue
            flux = (body_flux or {}).get(b, float(exposure.star_flux(BODY_MAGNITUDE.get(b, 0.0))))
            jit = (body_jitter_px or {}).get(b, 0.0)
            shift = rng.normal(0.0, jit, 2) if (jit > 0 and rng is not None) else np.zeros(2)
            _add_body(signal, camera, eph, info, epoch, r_sc, v_sc, attitude, psf, flux, shift)
            infos.append(info)
    image = exposure.expose(signal, rng)
    return SyntheticScene(image, float(epoch), attitude, commanded or attitude, r_sc, v_sc, exposure, image_id,
                          pred.ids[inside], pred.uv[inside], pred.mag[inside], infos)


DEFAULT_PATTERN = "LSSSL"
MIN_GAP_S = 5.0
MAX_BLOCK = 5


def synth_block(camera: CameraModel, eph: EphemerisSet, catalog: StarCatalog, targets: Sequence[str],
                t_start: float, r_sc, v_sc, rng: np.random.Generator, psf: PsfModel = DEFAULT_PSF,
                long_exposure: Optional[ExposureModel] = None, pattern: str = DEFAULT_PATTERN,
                gap_s: float = 10.0, drift_arcsec_s: float = 4.0, short_peak_dn: float = 700.0,
                pointing_offset: float = 0.005, block_id: str = "blk", noise: bool = True,
                boresight=None, body_jitter_px: Optional[Dict[str, float]] = None) -> List[SyntheticScene]:
    """An image block: long-exposure star frames bracketing short-exposure
    frames of ``targets``.

    The camera points at the first target (or at ``boresight``) and drifts
    at ``drift_arcsec_s`` about a fixed random axis.  Short exposures are
    scaled so the brightest target peaks near ``short_peak_dn``.  The
    spacecraft moves rectilinearly over the block.
    """
    pattern = pattern.upper()
    if len(pattern) > MAX_BLOCK:
        raise ParameterError(f"an image block holds at most {MAX_BLOCK} images, got {len(pattern)}")
    if not pattern or set(pattern) - {"L", "S"}:
        raise ParameterError("exposure pattern must be a string of 'L' and 'S'")
    if gap_s < MIN_GAP_S:
        raise ParameterError(f"images must be at least {MIN_GAP_S} s apart")
    if not targets:
        raise ParameterError("at least one target body is required")
    long_exposure = long_exposure or tune_exposure(psf)
    r_sc = np.asarray(r_sc, dtype=float)
    v_sc = np.asarray(v_sc, dtype=float)
    los = boresight
    if los is None:
        los = eph.light_time_corrected_state(targets[0], t_start, r_sc).position - r_sc
    att0 = pointing_attitude(aberrate(unit(los), v_sc), rng, pointing_offset)
    axis = unit(rng.normal(size=3))
    rate = math.radians(drift_arcsec_s / 3600.0)

    # short gain from the brightest target's unit-gain peak
    unit_exp = ExposureModel(gain=1.0, read_noise=0.0, background=0.0, saturation=np.inf)
    probe = synth_starfield(att0, t_start, r_sc, v_sc, StarCatalog.empty(), camera, psf, unit_exp,
                            None, targets, eph)
    peak = float(probe.image.max())
    if not peak > 0:
        raise ParameterError("no target falls on the sensor")
    short = long_exposure.scaled((short_peak_dn - long_exposure.background) / (peak * long_exposure.gain))

    scenes = []
    for k, kind in enumerate(pattern):
        t = t_start + k * gap_s
        att = Rotation.from_rotvec(axis * rate * (t - t_start)) @ att0
        r = r_sc + v_sc * (t - t_start)
        exp = long_exposure if kind == "L" else short
        scenes.append(synth_starfield(att, t, r, v_sc, catalog, camera, psf, exp, rng if noise else None,
                                      targets, eph, commanded=att0, image_id=f"{block_id}_{k}{kind.lower()}",
                                      body_jitter_px=body_jitter_px if kind == "S" else None))
    return scenes


def mercury_mars_geometry(eph: EphemerisSet, t: float, separation_deg: float = 5.0,
                          mercury_range_au: float = 1.0):
    """Spacecraft state from which Mercury and Mars appear ``separation_deg``
    apart, Mercury at ``mercury_range_au``; circular-speed heliocentric
    velocity."""
    pm = eph.position("mercury", t)
    pa = eph.position("mars", t)
    axis = unit(pm - pa)
    base = pm + mercury_range_au * AU_KM * axis
    perp = unit(np.cross(axis, [0.0, 0.0, 1.0]))

    def sep(h):
        r = base + h * perp
        return math.degrees(math.acos(np.clip(unit(pm - r) @ unit(pa - r), -1, 1)))

    lo, hi = 0.0, 0.5 * mercury_range_au * AU_KM
    if sep(hi) < separation_deg:
        raise ParameterError("requested separation not reachable")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if sep(mid) < separation_deg else (lo, mid)
    r = base + 0.5 * (lo + hi) * perp
    n = np.linalg.norm(r)
    v = math.sqrt(GM["sun"] / n) * unit(np.cross([0.0, 0.0, 1.0], r))
    return r, v
