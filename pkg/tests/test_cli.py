import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from heightbev import cli, predictor
from heightbev.bevgrid import heightmap_to_gray, load_heightmap_csv, read_pgm
from heightbev.errors import DivergenceDetected
from heightbev.geometry import CameraModel
from heightbev.metrics import Detection, save_detections_json
from heightbev.synthscene import generate, load_scene, save_scene


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    assert cli.main(["generate", "--out", str(d), "--n-scenes", "2", "--seed", "3", "--min-boxes", "3", "--max-boxes", "4"]) == 0
    return d


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_bounds_csv(tmp_path, capsys):
    calib = tmp_path / "cam.json"
    CameraModel(fx=800.0, fy=900.0, u0=320.0, v0=240.0, width=640, height=480).save(calib)
    code, out, _ = run(["bounds", "--calib", calib, "--eps", 0.5, "--sweep", 5, "--steps", 2000], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 5
    assert float(rows[0]["depth_bound_m"]) == 0.5
    for r in rows:
        assert 0.99 <= float(r["depth_ratio"]) <= 1.0
        assert 0.99 <= float(r["height_ratio"]) <= 1.0
        assert float(r["height_over_depth"]) == pytest.approx(float(r["v_offset_over_fy"]), rel=1e-12)


def test_gtmap_outputs_agree(tmp_path, capsys):
    scene_file = tmp_path / "s.json"
    save_scene(generate(2, 5), scene_file)
    code, _, _ = run(["gtmap", "--scene", scene_file, "--out", tmp_path / "maps", "--lidar", "--rays", 256], capsys)
    assert code == 0
    g = load_scene(scene_file).grid
    for name in ("boxes", "lidar", "fused"):
        hm = load_heightmap_csv(tmp_path / "maps" / f"{name}.csv", g)
        assert np.array_equal(read_pgm(tmp_path / "maps" / f"{name}.pgm"), heightmap_to_gray(hm))
    boxes = load_heightmap_csv(tmp_path / "maps" / "boxes.csv", g)
    fused = load_heightmap_csv(tmp_path / "maps" / "fused.csv", g)
    b = boxes.indicator == 1
    assert np.array_equal(fused.y[b], boxes.y[b])


def test_gtmap_empty_scene(tmp_path, capsys):
    scene_file = tmp_path / "empty.json"
    save_scene(generate(0, 0), scene_file)
    assert run(["gtmap", "--scene", scene_file, "--out", tmp_path / "m"], capsys)[0] == 0
    hm = load_heightmap_csv(tmp_path / "m" / "boxes.csv", load_scene(scene_file).grid)
    assert hm.indicator.sum() == 0


def test_generate_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        run(["generate", "--out", tmp_path / name, "--n-scenes", 2, "--seed", 1], capsys)
    for f in ("scene_000.json", "scene_001.json"):
        assert (tmp_path / "a" / f).read_text() == (tmp_path / "b" / f).read_text()


def test_train_is_repeatable(scene_dir, tmp_path, capsys):
    logs = []
    for name in ("r1", "r2"):
        code, out, _ = run(["train", "--scenes", scene_dir, "--epochs", 2, "--out", tmp_path / name], capsys)
        assert code == 0
        assert json.loads(out)["epochs"] == 2
        logs.append((tmp_path / name / "train_log.csv").read_text())
    assert logs[0] == logs[1]
    assert len(predictor.read_training_log(tmp_path / "r1" / "train_log.csv")) == 2


def test_train_zero_lr_keeps_init(scene_dir, tmp_path, capsys):
    run(["train", "--scenes", scene_dir, "--epochs", 1, "--lr", 0, "--out", tmp_path], capsys)
    params, header = predictor.load_checkpoint(tmp_path / "checkpoint.bin")
    assert np.array_equal(params.flat(), predictor.init_params(32, 64, 3, 0).flat())
    assert header["epoch"] == 1


def test_eval_ground_truth_detections_score_one(scene_dir, tmp_path, capsys):
    for p in sorted(scene_dir.glob("*.json")):
        save_detections_json([Detection(b, 1.0) for b in load_scene(p).boxes], tmp_path / p.name)
    code, out, _ = run(["eval", "--scenes", scene_dir, "--detections", tmp_path], capsys)
    assert code == 0
    assert json.loads(out.splitlines()[0])["NDS"] == pytest.approx(1.0)


def test_eval_gt_heights_and_saved_detections(scene_dir, tmp_path, capsys):
    code, out, _ = run(
        ["eval", "--scenes", scene_dir, "--gt-heights", "--json-out", tmp_path / "r.json", "--save-detections", tmp_path / "d"],
        capsys,
    )
    assert code == 0
    result = json.loads((tmp_path / "r.json").read_text())
    assert result == json.loads(out.splitlines()[0])
    assert result["mAP"] > 0.8
    again = run(["eval", "--scenes", scene_dir, "--detections", tmp_path / "d"], capsys)[1]
    assert json.loads(again.splitlines()[0]) == pytest.approx(result)


def test_sample_writes_pgm(scene_dir, tmp_path, capsys):
    scene = sorted(scene_dir.glob("*.json"))[0]
    code, _, _ = run(["sample", "--scene", scene, "--out", tmp_path / "q.pgm", "--gt-heights", "--channel", 1], capsys)
    assert code == 0
    img = read_pgm(tmp_path / "q.pgm")
    assert img.shape == (200, 200) and img.max() == 255


@pytest.mark.parametrize(
    "args",
    [
        [],
        ["nope"],
        ["bounds", "--eps", "1"],
        ["bounds", "--calib", "x.json", "--eps", "-1"],
        ["eval", "--tau", "2"],
        ["eval", "--gt-heights", "--baseline"],
        ["generate", "--out", "x", "--min-boxes", "5", "--max-boxes", "2"],
    ],
)
def test_usage_errors_exit_1(args, capsys):
    code, _, err = run(args, capsys)
    assert code == 1
    assert err.strip().count("\n") == 0 and err.startswith("error:")


def test_eval_needs_checkpoint(scene_dir, capsys):
    assert run(["eval", "--scenes", scene_dir], capsys)[0] == 1


def test_data_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert run(["gtmap", "--scene", tmp_path / "bad.json", "--out", tmp_path], capsys)[0] == 2
    assert run(["bounds", "--calib", tmp_path / "missing.json", "--eps", 1], capsys)[0] == 2
    assert run(["train", "--scenes", tmp_path / "empty_dir"], capsys)[0] == 2


def test_divergence_exits_3(scene_dir, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise DivergenceDetected("loss is nan")

    monkeypatch.setattr(predictor, "fit", boom)
    code, _, err = run(["train", "--scenes", scene_dir, "--epochs", 1, "--out", tmp_path], capsys)
    assert code == 3 and "numerical failure" in err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "heightbev", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "bounds" in res.stdout
