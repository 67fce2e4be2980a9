import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opnav import ParameterError
from opnav.camera import ARCSEC, CameraModel, ObserverState
from opnav.ephemeris import AU_KM, YEAR_S
from opnav.numerics import Rotation, angle_between
from opnav.stars import (
    MAS,
    AttitudeSolution,
    CatalogStar,
    InsufficientMatchesError,
    StarCatalog,
    davenport_q,
    generate_catalog,
    match_stars,
    predict_stars,
    radec_to_unit,
    solve_attitude,
    bracket_attitude,
    star_direction,
    tangent_basis,
)

CAM = CameraModel.default()
V_OBS = np.array([12.0, -25.0, 8.0])


def _star(e0, mu_a=0.0, mu_d=0.0, plx=0.0):
    return CatalogStar(1, e0, mu_a, mu_d, plx, 5.0, 0.0)


def test_static_star_direction_unchanged():
    e0 = radec_to_unit(1.2, -0.4)
    assert np.allclose(star_direction(_star(e0), 3e8, [0, 0, 0]), e0, atol=1e-15)


def test_parallax_one_arcsec_at_one_au():
    e0 = np.array([0.0, 0.0, 1.0])
    e = star_direction(_star(e0, plx=ARCSEC), 0.0, [AU_KM, 0, 0])
    defl = math.atan2(np.linalg.norm(np.cross(e, e0)), e @ e0)
    assert defl == pytest.approx(ARCSEC, rel=1e-3)
    assert e[0] < 0  # displaced away from the observer offset


def test_proper_motion_shift_along_east():
    e0 = radec_to_unit(0.7, 0.3)
    p, q = tangent_basis(e0)
    e = star_direction(_star(e0, mu_a=100 * MAS), 25 * YEAR_S, [0, 0, 0])
    d = e - e0
    assert np.linalg.norm(d) / ARCSEC == pytest.approx(2.5, rel=1e-6)
    assert d @ p / np.linalg.norm(d) > 1 - 1e-9
    assert abs(d @ q) < 1e-15


def test_tangent_basis_orthonormal():
    e0 = radec_to_unit(np.array([0.1, 2.0, 4.0]), np.array([-1.0, 0.0, 1.2]))
    p, q = tangent_basis(e0)
    for a, b in [(p, q), (p, e0), (q, e0)]:
        assert np.allclose(np.sum(a * b, axis=1), 0, atol=1e-15)
    assert np.allclose(np.cross(p, q), e0, atol=1e-15)  # east x north = radial


@settings(max_examples=50, deadline=None)
@given(ra=st.floats(0, 2 * math.pi), dec=st.floats(-1.5, 1.5), mua=st.floats(-1e-5, 1e-5),
       mud=st.floats(-1e-5, 1e-5), plx=st.floats(0, 1e-5), t=st.floats(-1e9, 1e9),
       r=st.lists(st.floats(-2e9, 2e9), min_size=3, max_size=3))
def test_star_direction_is_unit(ra, dec, mua, mud, plx, t, r):
    e = star_direction(_star(radec_to_unit(ra, dec), mua, mud, plx), t, r)
    assert abs(np.linalg.norm(e) - 1) < 1e-12


def test_catalog_star_validation():
    with pytest.raises(ParameterError):
        CatalogStar(1, [1.0, 1.0, 0.0], 0, 0, 0, 1, 0)
    with pytest.raises(ParameterError):
        CatalogStar(1, [1.0, 0.0, 0.0], 0, 0, -1e-9, 1, 0)


def test_catalog_vectorized_matches_scalar():
    cat = generate_catalog(50, seed=3)
    pos = np.array([1.2e8, -0.5e8, 0.1e8])
    t = 1e8
    e = cat.directions(t, pos)
    for k in (0, 17, 49):
        assert np.allclose(e[k], star_direction(cat.star(cat.ids[k]), t, pos), atol=1e-15)


def test_catalog_text_round_trip(tmp_path):
    cat = generate_catalog(40, seed=9)
    cat.save(tmp_path / "c.txt")
    back = StarCatalog.load(tmp_path / "c.txt")
    assert np.array_equal(back.ids, cat.ids)
    assert np.allclose(back.e0, cat.e0, atol=1e-12)
    assert np.allclose(back.parallax, cat.parallax, rtol=1e-12)
    assert np.allclose(back.t_ep, cat.t_ep, atol=1e-3)


def test_bundled_catalog_is_reproducible():
    bundled = StarCatalog.bundled()
    regen = generate_catalog()
    assert len(bundled) == 2500
    assert np.allclose(bundled.e0, regen.e0, atol=1e-12)
    assert np.array_equal(bundled.mag, regen.mag)


def test_catalog_bad_rows():
    with pytest.raises(ParameterError):
        StarCatalog.from_text("1 2 3\n")


# -- matching ----------------------------------------------------------------


def _field(rng, n=20):
    pred = rng.uniform([20, 20], [CAM.cols - 21, CAM.rows - 21], (n, 2))
    return pred, np.arange(100, 100 + n)


def test_exact_projections_all_match(rng):
    pred, ids = _field(rng)
    m = match_stars(pred[::-1], pred, ids)
    assert len(m) == len(ids)
    assert np.allclose(m.residuals, 0)
    assert set(m.ids) == set(ids)


def test_biased_field_with_impostors_monte_carlo():
    good = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pred, ids = _field(rng)
        meas = pred + np.array([3.0, -1.5])
        imp = rng.uniform([0, 0], [CAM.cols - 1, CAM.rows - 1], (50, 2))
        cand = np.vstack([meas, imp])
        perm = rng.permutation(len(cand))
        m = match_stars(cand[perm], pred, ids)
        truth = {tuple(np.round(p, 9)): i for p, i in zip(meas, ids)}
        got = {tuple(np.round(p, 9)): i for p, i in zip(m.measured, m.ids)}
        if got == truth:
            good += 1
    assert good >= 95


def test_ratio_test_drops_ambiguous_candidate():
    pred = np.array([[100.0, 100.0], [106.0, 100.0], [400.0, 300.0], [700.0, 500.0]])
    ids = np.array([1, 2, 3, 4])
    cand = np.array([[103.0, 100.2], [400.0, 300.0], [700.0, 500.0]])
    m = match_stars(cand, pred, ids)
    assert list(m.ids) == [3, 4]


def test_insufficient_matches():
    pred = np.array([[100.0, 100.0], [500.0, 500.0]])
    with pytest.raises(InsufficientMatchesError):
        match_stars([[100.0, 100.0], [900.0, 100.0]], pred, [1, 2])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_matching_is_injective(seed):
    rng = np.random.default_rng(seed)
    pred, ids = _field(rng, 15)
    # several candidates clustered on each star
    cand = np.vstack([pred + rng.normal(0, 0.8, pred.shape) for _ in range(3)])
    try:
        m = match_stars(cand, pred, ids)
    except InsufficientMatchesError:
        return
    assert len(set(m.ids.tolist())) == len(m)
    assert len({tuple(x) for x in m.measured}) == len(m)
    assert np.all(np.linalg.norm(m.residuals, axis=1) <= 10.0)


# -- attitude ----------------------------------------------------------------


def _synthetic_matches(rng, att, n=10, noise=0.0, cam=CAM):
    uv = rng.uniform([40, 40], [cam.cols - 41, cam.rows - 41], (n, 2))
    b = cam.unproject(uv[:, 0], uv[:, 1])
    from opnav.camera import deaberrate

    e = deaberrate(att.inv().apply(b), V_OBS)
    meas = uv + rng.normal(0, noise, uv.shape) if noise else uv
    from opnav.stars import StarMatchSet

    return StarMatchSet(meas, np.arange(n), np.zeros((n, 2)), uv), e


def test_davenport_recovers_exact_rotation(rng):
    T = Rotation.from_rotvec(rng.normal(size=3))
    r = rng.normal(size=(6, 3))
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    b = T.apply(r)
    assert angle_between(davenport_q(b, r), T) < 1e-12


def test_noiseless_attitude_recovery(rng):
    att = Rotation.align_boresight([0.3, -0.5, 0.8], 0.4)
    m, e = _synthetic_matches(rng, att)
    sol = solve_attitude(m, e, CAM, 0.0, V_OBS)
    assert angle_between(sol.attitude, att) < 0.1 * ARCSEC
    assert sol.rms_px < 1e-6 and sol.n_stars == 10 and not sol.minimal


def test_attitude_noise_monte_carlo():
    # boresight pointing error; roll about the boresight is weaker by the
    # ratio of focal length to star radius and is reported separately
    point, roll = [], []
    att = Rotation.align_boresight([0.1, 0.9, -0.2], 1.1)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m, e = _synthetic_matches(rng, att, noise=0.1)
        d = (solve_attitude(m, e, CAM, 0.0, V_OBS).attitude @ att.inv()).as_rotvec() / ARCSEC
        point.append(math.hypot(d[0], d[1]))
        roll.append(abs(d[2]))
    scale = 0.1 * CAM.ifov / ARCSEC / math.sqrt(10)
    assert np.percentile(point, 95) < 3.0
    assert 0.5 * scale < np.median(point) < 3 * scale
    assert np.median(roll) > np.median(point)


def test_two_star_minimal_geometry(rng):
    att = Rotation.align_boresight([1.0, 0.2, 0.1])
    m, e = _synthetic_matches(rng, att, n=2, noise=0.3)
    sol = solve_attitude(m, e, CAM, 5.0, V_OBS)
    assert sol.minimal and "minimal" in sol.warning
    # 3 rotational DOF against 4 measurements: only the separation mismatch
    # survives, directed along the line joining the stars (up to the slight
    # non-uniformity of the gnomonic scale)
    r = sol.residuals
    sep = m.measured[1] - m.measured[0]
    sep /= np.linalg.norm(sep)
    perp = np.array([-sep[1], sep[0]])
    scale = np.linalg.norm(r)
    assert abs(r[0] @ perp) < 1e-3 * scale and abs(r[1] @ perp) < 1e-3 * scale
    assert (r[0] @ sep) * (r[1] @ sep) < 0


    att = Rotation.identity()
    uv = np.array([[640.0, 512.0], [645.0, 512.0], [640.0, 518.0]])
    b = CAM.unproject(uv[:, 0], uv[:, 1])
    from opnav.camera import deaberrate
    from opnav.stars import StarMatchSet

    e = deaberrate(b, V_OBS)
    sol = solve_attitude(StarMatchSet(uv, np.arange(3), np.zeros((3, 2)), uv), e, CAM, 0.0, V_OBS)
    assert "poorly conditioned" in sol.warning


def test_post_fit_rms_not_worse_than_commanded(rng):
    att = Rotation.align_boresight([0.0, 0.0, 1.0], 0.2)
    commanded = Rotation.from_rotvec([2e-4, -1e-4, 3e-4]) @ att
    m, e = _synthetic_matches(rng, att, noise=0.2)
    sol = solve_attitude(m, e, CAM, 0.0, V_OBS, prior=commanded)
    assert sol.rms_px <= sol.prefit_rms_px


def test_end_to_end_predict_match_solve():
    cat = generate_catalog(400, seed=5, center=[0.2, 0.3, 0.93], radius_deg=10)
    att = Rotation.align_boresight([0.2, 0.3, 0.93], 0.3)
    pos = np.array([1.0e8, 0.5e8, 0.0])
    pred = predict_stars(cat, CAM, att, 0.0, pos, V_OBS, mag_limit=None)
    assert len(pred.ids) > 10
    # measured stars under a slightly different true attitude
    truth = Rotation.from_rotvec([1e-4, 0.0, -5e-5]) @ att
    uv, _ = CAM.project(pred.directions, ObserverState(V_OBS, truth))
    m = match_stars(uv, pred.uv, pred.ids)
    assert len(m) == len(pred.ids)
    k = {int(i): a for a, i in enumerate(pred.ids)}
    sol = solve_attitude(m, pred.directions[[k[int(i)] for i in m.ids]], CAM, 0.0, V_OBS, prior=att)
    assert angle_between(sol.attitude, truth) < 1e-3 * ARCSEC


# -- bracketing --------------------------------------------------------------


def _sol(att, t):
    return AttitudeSolution(att, 10, 0.1, t)


def test_bracket_midpoint_forty_arcsec_drift():
    a0 = Rotation.align_boresight([0.3, 0.4, 0.5])
    a1 = Rotation.from_axis_angle([0.0, 1.0, 0.0], 40 * ARCSEC) @ a0
    mid = bracket_attitude(_sol(a0, 100.0), _sol(a1, 110.0), 105.0)
    assert angle_between(mid, a0) / ARCSEC == pytest.approx(20.0, abs=1e-6)
    assert angle_between(mid, a1) / ARCSEC == pytest.approx(20.0, abs=1e-6)


def test_bracket_endpoint_and_identical():
    a0 = Rotation.from_rotvec([0.1, 0.2, 0.3])
    a1 = Rotation.from_rotvec([0.1, 0.2, 0.31])
    assert angle_between(bracket_attitude(_sol(a0, 0.0), _sol(a1, 10.0), 0.0), a0) < 1e-12
    for t in (0.0, 3.3, 10.0):
        assert angle_between(bracket_attitude(_sol(a0, 0.0), _sol(a0, 10.0), t), a0) < 1e-12


def test_bracket_errors():
    a = Rotation.identity()
    with pytest.raises(ParameterError):
        bracket_attitude(_sol(a, 10.0), _sol(a, 0.0), 5.0)
    with pytest.raises(ParameterError):
        bracket_attitude(_sol(a, 0.0), _sol(a, 10.0), 11.0)
