import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opnav import ParameterError
from opnav.io import IoError, read_csv, read_json, read_pgm, write_csv, write_json, write_pgm


@settings(max_examples=30, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 1023)))
def test_pgm_round_trip(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("pgm") / "a.pgm"
    write_pgm(p, img)
    np.testing.assert_array_equal(read_pgm(p), img)


def test_pgm_rounds_and_clamps(tmp_path):
    p = tmp_path / "a.pgm"
    write_pgm(p, np.array([[-3.0, 0.4, 0.6], [1022.6, 5000.0, 17.5]]))
    np.testing.assert_array_equal(read_pgm(p), [[0, 0, 1], [1023, 1023, 18]])
    head = p.read_bytes()[:15]
    assert head.startswith(b"P5\n3 2\n1023\n")


def test_pgm_header_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n1023\n" + np.array([5, 700], ">u2").tobytes())
    np.testing.assert_array_equal(read_pgm(p), [[5, 700]])


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n7", b"P5\n4 4\n1023\n\x00\x01", b"P5\n"])
def test_pgm_malformed(tmp_path, data):
    p = tmp_path / "bad.pgm"
    p.write_bytes(data)
    with pytest.raises(IoError):
        read_pgm(p)


def test_pgm_rejects_3d(tmp_path):
    with pytest.raises(ParameterError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))


def test_missing_files_raise_io_error(tmp_path):
    for fn in (read_pgm, read_json, read_csv):
        with pytest.raises(IoError, match="nope"):
            fn(tmp_path / "nope")
    assert issubclass(IoError, OSError)


def test_json_round_trip_with_numpy(tmp_path):
    p = tmp_path / "a.json"
    write_json(p, {"b": np.arange(3), "a": np.float64(0.1), "c": [np.int32(4)]})
    assert read_json(p) == {"a": 0.1, "b": [0, 1, 2], "c": [4]}
    assert p.read_text().index('"a"') < p.read_text().index('"b"')


def test_json_invalid(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(IoError):
        read_json(p)


def test_csv_floats_round_trip_exactly(tmp_path):
    p = tmp_path / "a.csv"
    x = [0.1 + 0.2, 1e-17, -3.25]
    write_csv(p, [{"x": v, "name": f"s{i}"} for i, v in enumerate(x)], ["name", "x", "missing"])
    rows = read_csv(p)
    assert [float(r["x"]) for r in rows] == x
    assert rows[0]["missing"] == ""
