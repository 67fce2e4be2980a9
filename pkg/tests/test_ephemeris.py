import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opnav import ParameterError
from opnav.ephemeris import (
    AU_KM,
    C_KM_S,
    DAY_S,
    GM,
    EphemerisSet,
    FixedSource,
    KeplerSource,
    TableSource,
    default_ephemeris,
    solve_kepler,
    table_from_function,
)


def bisect_kepler(M, e):
    # independent oracle: bracketing bisection on f(E) = E - e sin E - M
    M = math.remainder(M, 2 * math.pi)
    lo, hi = -math.pi, math.pi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid - e * math.sin(mid) - M > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@given(st.floats(-20, 20), st.floats(0, 0.97))
@settings(max_examples=300)
def test_kepler_solver_matches_bisection(M, e):
    assert abs(solve_kepler(M, e) - bisect_kepler(M, e)) < 1e-12


def test_circular_orbit_constant_radius():
    src = KeplerSource(a=1.2 * AU_KM, e=0.0, inc=0.3, raan=1.0, argp=0.2, mean_anomaly=0.0, gm=GM["sun"])
    radii = [np.linalg.norm(src.relative_state(t)[0]) for t in np.linspace(0, src.period, 100)]
    assert np.max(np.abs(np.array(radii) / (1.2 * AU_KM) - 1)) < 1e-9


def test_aphelion_at_half_period():
    a, e = AU_KM, 0.0167
    src = KeplerSource(a=a, e=e, inc=0.0, raan=0.0, argp=0.0, mean_anomaly=0.0, gm=GM["sun"])
    r, _ = src.relative_state(src.period / 2)
    assert np.linalg.norm(r) == pytest.approx(a * (1 + e), rel=1e-12)


def test_energy_integral():
    eph = default_ephemeris()
    for body in ["mercury", "mars", "jupiter"]:
        src = eph.sources[body]
        eps0 = None
        for t in np.linspace(-3e7, 3e7, 25):
            r, v = src.relative_state(t)
            eps = v @ v / 2 - src.gm / np.linalg.norm(r)
            eps0 = eps if eps0 is None else eps0
            assert abs(eps / eps0 - 1) < 1e-9


def test_table_exact_at_nodes_and_continuous():
    src = KeplerSource(a=AU_KM, e=0.1, inc=0.1, raan=0.2, argp=0.3, mean_anomaly=0.4, gm=GM["sun"])
    tab = table_from_function(src.relative_state, 0.0, 20 * DAY_S, DAY_S / 4)
    k = 7
    r, v = tab.relative_state(tab.times[k])
    assert np.array_equal(r, tab.states[k, :3]) and np.array_equal(v, tab.states[k, 3:])
    # position jump across every segment boundary, after removing the motion
    # accumulated over the probing interval
    d = 1e-3
    for tk in tab.times[1:-1]:
        left, vl = tab.relative_state(tk - d)
        right, vr = tab.relative_state(tk + d)
        assert np.linalg.norm(right - left - d * (vl + vr)) < 1e-6
    # interpolation error against the truth is small
    t = 5.37 * DAY_S
    assert np.linalg.norm(tab.relative_state(t)[0] - src.relative_state(t)[0]) < 1.0


def test_table_rejects_bad_times():
    with pytest.raises(ParameterError):
        TableSource(np.array([0.0, 0.0]), np.zeros((2, 6)))


def test_out_of_span_names_body():
    tab = TableSource(np.array([0.0, 10.0]), np.zeros((2, 6)))
    eph = EphemerisSet({"spacecraft": tab})
    with pytest.raises(ParameterError, match="spacecraft"):
        eph.state("spacecraft", 11.0)


def test_default_ephemeris_sanity():
    eph = default_ephemeris()
    for body, a_au in [("earth", 1.0), ("mars", 1.52), ("jupiter", 5.2), ("saturn", 9.54)]:
        r = np.linalg.norm(eph.position(body, 0.0)) / AU_KM
        assert abs(r - a_au) / a_au < 0.1
    rm = eph.position("moon", 0.0) - eph.position("earth", 0.0)
    assert 3.5e5 < np.linalg.norm(rm) < 4.1e5


def test_light_time_static_body():
    eph = EphemerisSet({"sun": FixedSource((AU_KM, 0.0, 0.0))})
    res = eph.light_time_corrected_state("sun", 0.0, np.zeros(3))
    assert res.delta_t == pytest.approx(AU_KM / C_KM_S, abs=1e-9)
    assert res.delta_t == pytest.approx(499.00478, abs=1e-5)
    assert np.array_equal(res.position, np.array([AU_KM, 0.0, 0.0]))


def test_light_time_moving_body():
    # straight-line body at 4.5 AU moving 13 km/s tangentially
    r0 = 4.5 * AU_KM
    rows = np.array([[t, r0, 13.0 * t, 0.0, 0.0, 13.0, 0.0] for t in (-1e4, 1e4)])
    eph = EphemerisSet({"jupiter": TableSource(rows[:, 0], rows[:, 1:])})
    res = eph.light_time_corrected_state("jupiter", 0.0, np.zeros(3))
    offset = np.linalg.norm(res.position - np.array([r0, 0, 0]))
    assert offset == pytest.approx(13.0 * r0 / C_KM_S, rel=1e-6)
    assert 2.85e4 < offset < 2.95e4
    # fixed-point property
    again = np.linalg.norm(eph.state("jupiter", -res.delta_t)[0]) / C_KM_S
    assert abs(again - res.delta_t) < 1e-9
    assert res.iterations <= 4


def test_light_time_rejects_spacecraft():
    with pytest.raises(ParameterError):
        default_ephemeris().light_time_corrected_state("spacecraft", 0.0, np.zeros(3))


def test_json_round_trip(tmp_path):
    eph = default_ephemeris().with_source(
        "spacecraft", TableSource(np.array([0.0, 100.0]), np.arange(12.0).reshape(2, 6)))
    path = tmp_path / "eph.json"
    eph.save(path)
    back = EphemerisSet.load(path)
    for body in eph.bodies():
        for t in (0.0, 50.0):
            a, b = eph.state(body, t), back.state(body, t)
            assert np.allclose(a[0], b[0], rtol=0, atol=1e-6)
