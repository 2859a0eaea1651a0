import json
import os
import subprocess
import sys

import numpy as np
import pytest

from splatedit import io
from splatedit.cli import main
from splatedit.rasterizer import RenderSettings, render_forward
from splatedit.synthetic import mannequin_scene, membership_masks, orbit_cameras
from splatedit.turntable import render_turntable

BLACK = RenderSettings(background=(0.0, 0.0, 0.0))


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def workspace(tmp_path):
    """A small labeled rig on disk: scene, images, masks and a cameras JSON."""
    scene, is_garment = mannequin_scene(seed=0, density=0.3)
    cams = orbit_cameras(4, width=24, height=24)
    masks = membership_masks(scene, is_garment, cams, settings=BLACK)
    for i, (cam, mask) in enumerate(zip(cams, masks)):
        io.write_png(tmp_path / f"image_{i:04d}.png", render_forward(scene, cam, BLACK).rgb)
        io.write_mask(tmp_path / f"mask_{i:04d}.png", mask)
        cam.image_path = f"image_{i:04d}.png"
        cam.mask_path = f"mask_{i:04d}.png"
    io.save_cameras(cams, tmp_path / "cameras.json")
    io.save_scene(scene, tmp_path / "scene.gspl")
    return tmp_path


def test_no_arguments_is_usage_error(capsys):
    code, _, err = run([], capsys)
    assert code == 2 and "usage" in err


def test_help_exits_zero(capsys):
    code, out, _ = run(["-h"], capsys)
    assert code == 0 and "gradcheck" in out


def test_unknown_command(capsys):
    code, _, err = run(["explode"], capsys)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "unknown_command"


@pytest.mark.parametrize("argv", [
    ["gradcheck", "--bogus"],
    ["gradcheck", "--seed", "x"],
    ["render", "--scene", "s.gspl"],
    ["edit", "--scene", "a", "--cameras", "b", "--out", "c", "--editor", "magic"],
    ["edit", "--scene", "a", "--cameras", "b", "--out", "c", "--background", "2,0,0"],
])
def test_invalid_flags(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 3
    line = json.loads(err.strip())
    assert line == {"error": "invalid_flags", "message": line["message"], "exit": 3}


def test_missing_file(tmp_path, capsys):
    code, _, err = run(["render", "--scene", str(tmp_path / "nope.gspl"), "--orbit", "2",
                        "--out", str(tmp_path / "o")], capsys)
    assert code == 4 and json.loads(err)["error"] == "missing_file"


def test_malformed_scene_is_runtime_error(tmp_path, capsys):
    (tmp_path / "bad.gspl").write_bytes(b"junk")
    code, _, err = run(["render", "--scene", str(tmp_path / "bad.gspl"), "--orbit", "1",
                        "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and json.loads(err)["error"] == "MalformedHeaderError"


def test_render_one_png_per_camera(workspace, capsys):
    before = (workspace / "scene.gspl").read_bytes()
    code, out, _ = run(["render", "--scene", str(workspace / "scene.gspl"),
                        "--cameras", str(workspace / "cameras.json"),
                        "--out", str(workspace / "renders")], capsys)
    assert code == 0
    lines = [json.loads(l) for l in out.strip().splitlines()]
    assert lines[0]["config"]["command"] == "render" and lines[0]["config"]["tile_size"] == 16
    assert sorted(os.listdir(workspace / "renders")) == [f"view_{i:04d}.png" for i in range(4)]
    np.testing.assert_array_equal(io.read_png(workspace / "renders/view_0002.png"),
                                  io.read_png(workspace / "image_0002.png"))
    assert (workspace / "scene.gspl").read_bytes() == before


def test_label_edit_pipeline(workspace, capsys):
    code, out, _ = run(["label", "--scene", str(workspace / "scene.gspl"),
                        "--cameras", str(workspace / "cameras.json"),
                        "--out", str(workspace / "labeled.gspl")], capsys)
    assert code == 0
    labeled = io.load_scene(workspace / "labeled.gspl")
    assert json.loads(out.splitlines()[-1])["editable"] == labeled.editable.sum() > 0

    code, out, _ = run(["edit", "--scene", str(workspace / "labeled.gspl"),
                        "--cameras", str(workspace / "cameras.json"),
                        "--masks", str(workspace), "--out", str(workspace / "edited.gspl"),
                        "--iters", "5", "--refresh-interval", "2",
                        "--log", str(workspace / "log.ndjson")], capsys)
    assert code == 0
    assert json.loads(out.splitlines()[-1])["refreshes"] == 2
    edited = io.load_scene(workspace / "edited.gspl")
    fixed = ~labeled.editable
    np.testing.assert_array_equal(edited.sh[fixed], labeled.sh[fixed])
    assert len(open(workspace / "log.ndjson").readlines()) == 1 + 5 + 2


def test_edit_rejects_unlabeled_scene(workspace, capsys):
    code, _, err = run(["edit", "--scene", str(workspace / "scene.gspl"),
                        "--cameras", str(workspace / "cameras.json"),
                        "--out", str(workspace / "x.gspl"), "--iters", "1"], capsys)
    assert code == 1 and "editable" in json.loads(err)["message"]


def test_fit_command(workspace, capsys):
    code, out, _ = run(["fit", "--cameras", str(workspace / "cameras.json"),
                        "--out", str(workspace / "fit.gspl"), "--iters", "3",
                        "--n-init", "40"], capsys)
    assert code == 0
    assert len(io.load_scene(workspace / "fit.gspl")) == 40


def test_fit_is_deterministic(workspace, capsys):
    for name in ("a.gspl", "b.gspl"):
        assert run(["fit", "--cameras", str(workspace / "cameras.json"),
                    "--out", str(workspace / name), "--iters", "4", "--n-init", "30",
                    "--seed", "5"], capsys)[0] == 0
    assert (workspace / "a.gspl").read_bytes() == (workspace / "b.gspl").read_bytes()


def test_gradcheck_seed_7(capsys):
    code, out, _ = run(["gradcheck", "--seed", "7"], capsys)
    report = json.loads(out.strip().splitlines()[-1])
    assert code == 0 and report["pass"] and report["max_rel_error"] < 1e-2


def test_attn_demo(capsys):
    code, out, _ = run(["attn-demo", "--seed", "1"], capsys)
    report = json.loads(out.strip().splitlines()[-1])
    assert code == 0
    assert report["softmax_row_sum_error"] < 1e-6 and report["duplication_error"] < 1e-6
    assert report["lambda_one_error"] == 0.0
    assert run(["attn-demo", "--lambda", "2"], capsys)[0] == 3


def test_gen_toydata_and_lora_train(tmp_path, capsys):
    code, out, _ = run(["gen-toydata", "--out", str(tmp_path / "data"), "--count", "6",
                        "--size", "8"], capsys)
    assert code == 0
    manifest = json.load(open(tmp_path / "data/manifest.json"))
    assert len(manifest) == 6 and set(manifest[0]) >= {"image", "label", "mask"}
    code, out, _ = run(["lora-train", "--data", str(tmp_path / "data/manifest.json"),
                        "--out", str(tmp_path / "d.lora"), "--base-steps", "3",
                        "--iters", "3", "--rank", "2",
                        "--save-base", str(tmp_path / "base.npz")], capsys)
    assert code == 0
    assert (tmp_path / "d.lora").read_bytes()[:4] == b"LORA"
    assert (tmp_path / "base.npz").exists()


def test_turntable_writes_n_frames(tmp_path):
    scene, _ = mannequin_scene(seed=0, density=0.2)
    paths = render_turntable(scene, tmp_path, 5, 3.5, width=16, height=16)
    assert sorted(os.listdir(tmp_path)) == [f"frame_{i:04d}.png" for i in range(5)]
    assert len(paths) == 5


def test_single_frame_matches_render(tmp_path):
    scene, _ = mannequin_scene(seed=0, density=0.2)
    path, = render_turntable(scene, tmp_path, 1, 3.0, elevation=0.1, width=16, height=16)
    cam = orbit_cameras(1, 3.0, 0.1, 16, 16)[0]
    direct = tmp_path / "direct.png"
    io.write_png(direct, render_forward(scene, cam).rgb)
    assert open(path, "rb").read() == open(direct, "rb").read()


def test_orbit_closes():
    scene, _ = mannequin_scene(seed=0, density=0.3)
    start = orbit_cameras(1, width=32, height=32, phase=0.0)[0]
    end = orbit_cameras(1, width=32, height=32, phase=2 * np.pi)[0]
    np.testing.assert_allclose(render_forward(scene, end).rgb, render_forward(scene, start).rgb,
                               atol=1e-6)


@pytest.mark.parametrize("kwargs", [dict(frames=0, radius=1.0), dict(frames=2, radius=-1.0),
                                    dict(frames=2, radius=1.0, elevation=2.0),
                                    dict(frames=2, radius=1.0, center=(np.nan, 0, 0))])
def test_invalid_orbit(tmp_path, kwargs):
    scene, _ = mannequin_scene(seed=0, density=0.1)
    with pytest.raises(ValueError):
        render_turntable(scene, tmp_path, **kwargs)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "splatedit"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
