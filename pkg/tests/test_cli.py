import json

import numpy as np
import pytest

from opnav.cli import main
from opnav.io import read_csv, read_json


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def block(work):
    assert run("synth", "--out", work / "blk", "--no-plots") == 0
    return work / "blk"


@pytest.fixture(scope="module")
def extracted(work, block):
    assert run("extract", "--set", f"manifest={block / 'manifest.json'}", "--out", work / "ext") == 0
    return work / "ext"


@pytest.fixture(scope="module")
def mercury_mars(work):
    out = work / "mm"
    assert run("synth", "--set", "scenario=mercury-mars", "--set", "noise=false", "--out", out, "--no-plots") == 0
    assert run("extract", "--set", f"manifest={out / 'manifest.json'}", "--out", work / "mmx", "--no-plots") == 0
    return out, work / "mmx"


@pytest.fixture(scope="module")
def calibration_set(work):
    out = work / "cal"
    assert run("synth", "--set", "scenario=calibration", "--out", out, "--seed", 3) == 0
    return out


def test_demo_block_on_disk(block):
    man = read_json(block / "manifest.json")
    assert len(man["images"]) == 5
    for e in man["images"]:
        assert (block / e["raster"]).read_bytes().startswith(b"P5\n1280 1024\n1023\n")
        meta = read_json(block / e["meta"])
        assert set(meta) == {"epoch_s", "exposure_label", "commanded_quaternion", "gain_label", "image_id"}
        assert read_json(block / e["truth"])["image_id"] == meta["image_id"]
    assert (block / "reference.json").exists()


def test_extract_jupiter_block_bracketed(extracted):
    doc = read_json(extracted / "observations.json")
    assert len(doc["attitudes"]) == 2 and not doc["failures"]
    assert [o["attitude_source"] for o in doc["observations"]] == ["bracketed"] * 3
    assert all(o["body"] == "jupiter" for o in doc["observations"])
    rows = read_csv(extracted / "observations.csv")
    assert [r["image_id"] for r in rows] == ["b00_1s", "b00_2s", "b00_3s"]
    assert sorted(p.name for p in extracted.glob("*.png")) == ["extract_b00_1s.png", "extract_b00_2s.png",
                                                                "extract_b00_3s.png"]


def test_extract_missing_bracket_warns(work, block):
    man = read_json(block / "manifest.json")
    man["images"] = man["images"][:4]
    for e in man["images"]:
        for k in ("raster", "meta", "truth"):
            e[k] = str(block / e[k])
    (work / "cut.json").write_text(json.dumps(man | {"camera": str(block / "camera.json")}))
    assert run("extract", "--set", f"manifest={work / 'cut.json'}", "--out", work / "cut", "--no-plots") == 0
    obs = read_json(work / "cut" / "observations.json")["observations"]
    assert obs[-1]["attitude_source"] == "one-sided"
    assert "bracketing not possible" in obs[-1]["warning"]


def test_triangulate_two_simultaneous_lost(work, mercury_mars, capsys):
    syn, ext = mercury_mars
    code = run("triangulate", "--method", "lost", "--set", f"observations={ext / 'observations.json'}",
               "--set", 'image_ids=["b00_2s"]', "--set", f"reference={syn / 'reference.json'}",
               "--out", work / "tri")
    assert code == 0
    assert "sqrt_trace_P_km" in capsys.readouterr().out
    out = read_json(work / "tri" / "triangulation.json")
    assert out["n_observations"] == 2
    assert out["sqrt_trace_P_km"] > 0 and out["mahalanobis"] is not None
    assert out["error_km"] / np.linalg.norm(out["reference_r_km"]) < 1e-4
    rows = read_csv(work / "tri" / "residuals.csv")
    assert list(rows[0]) == ["image_id", "epoch", "body", "du", "dv", "sigma"]
    assert (work / "tri" / "triangulation.png").exists()


def test_midpoint_with_three_observations_rejected(work, extracted):
    code = run("triangulate", "--method", "midpoint", "--set", f"observations={extracted / 'observations.json'}",
               "--out", work / "mid")
    assert code == 2


def test_calibrate_recovers_distortion(work, calibration_set):
    assert run("calibrate", "--set", f"manifest={calibration_set / 'manifest.json'}", "--out", work / "calx") == 0
    cal = read_json(work / "calx" / "calibration.json")
    assert cal["post"]["rms_px"] < 0.3
    assert cal["pre"]["rms_px"] > 1.0
    truth = read_json(calibration_set / "truth_camera.json")
    cam = read_json(work / "calx" / "camera.json")
    assert cam["k1"] == pytest.approx(truth["k1"], abs=0.02)
    rows = read_csv(work / "calx" / "residuals.csv")
    assert list(rows[0]) == ["image_id", "star_id", "radius_px", "pre_px", "post_px"]
    assert len(rows) >= 20


def test_calibrate_already_calibrated_is_stable(work, calibration_set):
    code = run("calibrate", "--set", f"manifest={calibration_set / 'manifest.json'}",
               "--set", f"camera={calibration_set / 'truth_camera.json'}", "--out", work / "cal0", "--no-plots")
    assert code == 0
    truth = read_json(calibration_set / "truth_camera.json")
    cam = read_json(work / "cal0" / "camera.json")
    assert abs(cam["dx"] - truth["dx"]) < 0.5
    assert abs(cam["k1"] - truth["k1"]) < 0.02
    assert abs(cam["p1"] - truth["p1"]) < 5e-4


def test_calibrate_single_image_rejected(work):
    out = work / "cal1"
    assert run("synth", "--set", "scenario=calibration", "--set", "n_images=1", "--out", out, "--no-plots") == 0
    assert run("calibrate", "--set", f"manifest={out / 'manifest.json'}", "--out", work / "cal1x") == 2


def test_od_residual_csv(work):
    out = work / "camp"
    assert run("synth", "--set", "scenario=campaign", "--seed", 1, "--out", out) == 0
    code = run("od", "--set", f"observations={out / 'observations.json'}", "--set", f"guess={out / 'guess.json'}",
               "--set", f"reference={out / 'reference.json'}", "--out", work / "odx")
    assert code == 0
    rows = read_csv(work / "odx" / "residuals.csv")
    assert list(rows[0])[:5] == ["epoch", "body", "du", "dv", "sigma"]
    assert len(rows) == 59
    od = read_json(work / "odx" / "od.json")
    assert od["solution"]["converged"] and od["solution"]["mean_zero"]
    assert od["position_error_earth_radii"] < 1.0


def test_iod_refines_arc(work):
    out = work / "arc"
    assert run("synth", "--set", "scenario=iod-arc", "--set", "noise=false", "--out", out) == 0
    code = run("iod", "--set", f"observations={out / 'observations.json'}",
               "--set", f"reference={out / 'reference.json'}", "--out", work / "iodx")
    assert code == 0
    res = read_json(work / "iodx" / "iod.json")
    assert res["position_gain"] >= 5 and res["velocity_gain"] >= 10
    # iod output feeds od as an initial state
    code = run("od", "--set", f"observations={out / 'observations.json'}",
               "--set", f"guess={work / 'iodx' / 'iod.json'}", "--set", "estimate_beta=false",
               "--set", "beta_srp=0.012", "--out", work / "iod_od", "--no-plots")
    assert code == 0


def test_degenerate_geometry_exit_code(work):
    out = work / "arc2"
    assert run("synth", "--set", "scenario=iod-arc", "--out", out, "--no-plots") == 0
    code = run("iod", "--set", f"observations={out / 'observations.json'}", "--set", 'image_ids=["m000","m001"]',
               "--out", work / "iod2", "--no-plots")
    assert code == 3


@pytest.mark.parametrize("args,code", [
    (["synth", "--set", "scenario=nope"], 2),
    (["synth", "--set", "oops"], 2),
    (["synth", "--threads", "0"], 2),
    (["extract", "--set", "manifest=/no/such/manifest.json"], 4),
    (["od", "--set", "observations=/no/such.json"], 4),
    (["triangulate"], 2),
])
def test_exit_codes(work, args, code):
    assert run(*args, "--out", work / "err") == code


def test_malformed_config_is_io_error(work):
    p = work / "bad.json"
    p.write_text("{not json")
    assert run("synth", "--config", p, "--out", work / "err") == 4


def test_config_paths_resolve_against_config_dir(work, block):
    cfg = block / "extract_cfg.json"
    cfg.write_text(json.dumps({"manifest": "manifest.json", "method": "cob"}))
    assert run("extract", "--config", cfg, "--out", work / "ext_cfg", "--no-plots") == 0
    assert read_json(work / "ext_cfg" / "observations.json")["method"] == "cob"
