import json
import math

import numpy as np
import pytest

from rigidsynth import cli
from rigidsynth.camgeo import Intrinsics, Pose6DoF
from rigidsynth.config import ConfigError, RunConfig, load_bundle
from rigidsynth.evaluate import EvaluationError, evaluate_estimate
from rigidsynth.io import (
    FileFormatError,
    read_depth,
    read_flow,
    read_image,
    read_labels,
    write_depth,
    write_flow,
    write_image,
    write_json,
    write_labels,
)
from rigidsynth.synth import BackgroundConfig, ObjectConfig, SceneConfig, render_scene, write_bundle

K = Intrinsics(fx=60.0, fy=60.0, cx=31.5, cy=19.5, width=64, height=40)


def test_raster_round_trips(tmp_path, rng):
    d = rng.uniform(1, 50, (7, 9)).astype(np.float32)
    write_depth(tmp_path / "d.f32", d)
    assert np.array_equal(read_depth(tmp_path / "d.f32"), d)
    f = rng.normal(size=(7, 9, 2)).astype(np.float32)
    write_flow(tmp_path / "f.flo", f)
    assert np.array_equal(read_flow(tmp_path / "f.flo"), f)
    L = rng.integers(0, 4, (7, 9))
    write_labels(tmp_path / "l.png", L)
    assert np.array_equal(read_labels(tmp_path / "l.png"), L)
    img = rng.random((7, 9, 3))
    write_image(tmp_path / "i.png", img)
    assert np.abs(read_image(tmp_path / "i.png") - img).max() <= 0.5 / 255 + 1e-12


def test_raster_format_errors(tmp_path):
    (tmp_path / "bad.f32").write_bytes(b"XXXX" + b"\0" * 8)
    with pytest.raises(FileFormatError, match="bad.f32"):
        read_depth(tmp_path / "bad.f32")
    write_flow(tmp_path / "f.flo", np.zeros((2, 2, 2)))
    with pytest.raises(FileFormatError):
        read_depth(tmp_path / "f.flo")
    (tmp_path / "short.f32").write_bytes(np.array([(b"DPF1", 4, 4)], dtype=[("m", "S4"), ("w", "<i4"), ("h", "<i4")]).tobytes())
    with pytest.raises(FileFormatError):
        read_depth(tmp_path / "short.f32")


def test_run_config_validation(tmp_path):
    cfg = RunConfig()
    assert cfg.solver_options().weights.photometric == 2.0
    with pytest.raises(ConfigError, match="tau"):
        RunConfig.parse({"tau": 1.1})
    with pytest.raises(ConfigError, match="solver.bogus"):
        RunConfig.parse({"solver": {"bogus": 1}})
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


def test_evaluate_examples():
    gt = {"scene_id": "s", "ego": {"fwd": Pose6DoF(tx=0.1, tz=0.5).to_json(), "bwd": Pose6DoF().to_json()}, "objects": []}
    r = evaluate_estimate(gt, gt)
    assert r["ego"]["fwd"]["translation_m"] == 0.0 and r["ego"]["fwd"]["rotation_deg"] == 0.0
    pred = dict(gt, ego={"fwd": Pose6DoF(tx=0.11, tz=0.5).to_json(), "bwd": Pose6DoF().to_json()})
    r = evaluate_estimate(pred, gt)
    assert r["ego"]["fwd"]["translation_m"] == pytest.approx(0.01)
    assert r["ego"]["fwd"]["translation_pct"] == pytest.approx(100 * 0.01 / math.hypot(0.1, 0.5))
    assert round(r["ego"]["fwd"]["translation_pct"], 2) == 1.96
    gt_obj = dict(gt, objects=[{"id": 1, "fwd": Pose6DoF().to_json(), "bwd": Pose6DoF().to_json()}])
    with pytest.raises(EvaluationError, match="object 1"):
        evaluate_estimate(gt, gt_obj)
    with pytest.raises(EvaluationError, match="mismatch"):
        evaluate_estimate(dict(gt, scene_id="other"), gt)


@pytest.fixture
def bundle_dir(tmp_path):
    ego = Pose6DoF(0.0, 0.01, 0.0, 0.1, 0.0, 0.2)
    obj = ObjectConfig((1.4, 1.0), (0.0, 0.0, 6.0), motion=Pose6DoF(tx=0.2), texture_seed=4)
    b = render_scene(SceneConfig(K, BackgroundConfig(12.0, 0.0, 2), [obj], ego, scene_id="tiny"))
    write_bundle(b, tmp_path / "tiny")
    return tmp_path / "tiny", b


def test_load_bundle_matches_render(bundle_dir):
    d, b = bundle_dir
    pair = load_bundle(d / "manifest.json")
    assert pair.M1.shape == (1,) + K.shape
    assert np.array_equal(pair.M1, b.M1) and np.array_equal(pair.M2, b.M2)
    assert np.allclose(pair.D1, b.D1, rtol=1e-6)
    assert np.abs(pair.I1 - b.I1).max() <= 0.5 / 255 + 1e-12


def test_cli_warp_identity(tmp_path, rng):
    img = rng.random((K.height, K.width, 3))
    write_image(tmp_path / "i.png", img)
    write_depth(tmp_path / "d.f32", rng.uniform(2, 9, K.shape))
    write_json(tmp_path / "p.json", Pose6DoF().to_json())
    write_json(tmp_path / "k.json", K.to_json())
    for mode in ("forward", "inverse"):
        args = ["warp", mode, "--image", str(tmp_path / "i.png"), "--depth", str(tmp_path / "d.f32"),
                "--pose", str(tmp_path / "p.json"), "--intrinsics", str(tmp_path / "k.json"), "--out", str(tmp_path / mode)]
        assert cli.main(args + ["--alpha", "1"] if mode == "forward" else args) == 0
        assert (tmp_path / mode / "warped.png").read_bytes() == (tmp_path / "i.png").read_bytes()


def test_cli_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["warp", "inverse", "--image", "x.png"])
    assert e.value.code == 2
    (tmp_path / "c.json").write_text('{"alpha": 0}')
    (tmp_path / "m.json").write_text("{}")
    assert cli.main(["solve", "--bundle", str(tmp_path / "m.json"), "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o.json")]) == 2
    assert "alpha" in capsys.readouterr().err
    assert cli.main(["annotate", "--masks", str(tmp_path), "--flow", str(tmp_path), "--tau", "1.1", "--out", str(tmp_path / "a")]) == 2


def test_cli_annotate_empty(tmp_path):
    (tmp_path / "m").mkdir()
    (tmp_path / "f").mkdir()
    assert cli.main(["annotate", "--masks", str(tmp_path / "m"), "--flow", str(tmp_path / "f"), "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "tracks.json").read_text())
    assert man["frames"] == [] and man["pairs"] == []


def test_cli_synth_degenerate(tmp_path, capsys):
    cfg = SceneConfig(K, BackgroundConfig(12.0), [ObjectConfig((1.0, 1.0), (0.0, 0.0, 3.0), motion=Pose6DoF(tz=-4.0))])
    write_json(tmp_path / "s.json", cfg.to_json())
    assert cli.main(["synth", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 2
    assert "object 0" in capsys.readouterr().err


def test_cli_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("RIGIDSYNTH_THREADS", "zero")
    assert cli.main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path), "--out", str(tmp_path / "r.json")]) == 2


@pytest.mark.slow
def test_cli_solve_and_eval(bundle_dir, tmp_path):
    d, b = bundle_dir
    out = tmp_path / "est.json"
    assert cli.main(["solve", "--bundle", str(d / "manifest.json"), "--out", str(out)]) == 0
    assert cli.main(["eval", "--pred", str(out), "--gt", str(d / "meta.json"), "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["ego"]["fwd"]["translation_pct"] < 5.0
    assert rep["objects"][0]["bwd"]["translation_pct"] < 10.0
