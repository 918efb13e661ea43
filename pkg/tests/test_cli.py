import subprocess

import numpy as np
import pytest

from hera.cli import build_parser, main
from hera.fixtures import crossing_fixture, quad_mesh, ring_cameras, toy_ground_truth, toy_texture
from hera.geometry import Camera, project_point
from hera.hybrid import RenderOptions, Scene, render
from hera.io import (load_checkpoint, load_image, load_scene, read_metrics_csv, save_cameras, save_image, save_map,
                     save_obj, save_png, save_scene)
from hera.splats import SplatSet

from oracles import render_hybrid

SUBCOMMANDS = ["render", "animate", "fit", "metrics", "info"]


def _front_camera(size=48, f=40.0):
    return Camera.look_at([0, 0, -3], [0, 0, 0], [0, -1, 0], f, f, size, size)


def _mesh_scene(with_splats=False):
    tex, opa = toy_texture(8, 1)
    mesh = quad_mesh(tex_res=8, texture=tex, opacity=opa)
    return Scene(mesh, SplatSet.empty(1), [0.1, 0.1, 0.1])


def _run(*argv):
    return main([str(a) for a in argv])


# --- parser -----------------------------------------------------------------


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as ex:
        build_parser().parse_args([cmd, "--help"])
    assert ex.value.code == 0
    assert "--threads" in capsys.readouterr().out


def test_installed_entry_point():
    out = subprocess.run(["hera", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert all(c in out.stdout for c in SUBCOMMANDS)


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as ex:
        build_parser().parse_args(["render", "--scene", "a", "--cameras", "b", "--out", "c", "--bogus"])
    assert ex.value.code == 2
    with pytest.raises(SystemExit):
        build_parser().parse_args(["render", "--scene", "a", "--cameras", "b", "--out", "c", "--threads", "0"])


# --- render -----------------------------------------------------------------


def test_render_empty_splats_equals_mesh_only(tmp_path):
    save_scene(tmp_path / "s", _mesh_scene())
    save_cameras(tmp_path / "c.json", [("front", _front_camera())])
    assert _run("render", "--scene", tmp_path / "s", "--cameras", tmp_path / "c.json", "--out", tmp_path / "a",
                "--format", "heramap", "--background", "0.1,0.1,0.1") == 0
    assert _run("render", "--scene", tmp_path / "s", "--cameras", tmp_path / "c.json", "--out", tmp_path / "b",
                "--format", "heramap", "--background", "0.1,0.1,0.1", "--mask", "mesh") == 0
    a, b = load_image(tmp_path / "a" / "front.heramap"), load_image(tmp_path / "b" / "front.heramap")
    np.testing.assert_array_equal(a, b)
    assert a.std() > 0.01


def test_render_background_on_empty_scene(tmp_path):
    empty = Scene(None, SplatSet.empty(1))
    save_scene(tmp_path / "s", empty)
    save_cameras(tmp_path / "c.json", [("front", _front_camera(16)), ("side", ring_cameras(1, size=20)[0])])
    assert _run("render", "--scene", tmp_path / "s", "--cameras", tmp_path / "c.json", "--out", tmp_path / "o",
                "--background", "1,0,0") == 0
    for name, shape in (("front", (16, 16, 3)), ("side", (20, 20, 3))):
        img = load_image(tmp_path / "o" / f"{name}.png", linear=False)
        assert img.shape == shape
        assert np.all(img == [1, 0, 0])


def test_render_sort_modes_on_crossing_fixture(tmp_path):
    scene, cam = crossing_fixture()
    save_scene(tmp_path / "s", scene)
    save_cameras(tmp_path / "c.json", [("cam", cam)])
    for mode in ("stable", "legacy"):
        assert _run("render", "--scene", tmp_path / "s", "--cameras", tmp_path / "c.json", "--out",
                    tmp_path / mode, "--sort", mode, "--format", "heramap") == 0
    stable = load_image(tmp_path / "stable" / "cam.heramap")
    legacy = load_image(tmp_path / "legacy" / "cam.heramap")
    assert np.abs(stable - legacy).max() > 0.05
    ref, _, amb = render_hybrid(load_scene(tmp_path / "s"), cam, lam=0.05)
    assert np.abs(stable - ref)[~amb].max() < 1e-6


def test_render_threads_reproducible(tmp_path):
    gt = toy_ground_truth(num_splats=20)
    save_scene(tmp_path / "s", gt)
    save_cameras(tmp_path / "c.json", [("v", ring_cameras(1, size=40)[0])])
    for out in ("a", "b"):
        assert _run("render", "--threads", 1, "--scene", tmp_path / "s", "--cameras", tmp_path / "c.json",
                    "--out", tmp_path / out, "--format", "heramap") == 0
    assert (tmp_path / "a" / "v.heramap").read_bytes() == (tmp_path / "b" / "v.heramap").read_bytes()


def test_render_missing_asset_names_file(tmp_path, capsys):
    save_scene(tmp_path / "s", _mesh_scene())
    (tmp_path / "s" / "texture.heramap").unlink()
    save_cameras(tmp_path / "c.json", [("front", _front_camera())])
    assert _run("render", "--scene", tmp_path / "s", "--cameras", tmp_path / "c.json", "--out", tmp_path / "o") == 2
    assert "texture.heramap" in capsys.readouterr().err


# --- animate ----------------------------------------------------------------


def _animate_setup(tmp_path, offsets):
    gt = toy_ground_truth(num_splats=30)
    save_scene(tmp_path / "canon", gt)
    save_cameras(tmp_path / "c.json", [("front", _front_camera(64, 60.0))])
    (tmp_path / "frames").mkdir()
    m = gt.mesh
    for k, off in offsets:
        save_obj(tmp_path / "frames" / f"frame{k:03d}.obj", m.vertices + off, m.faces, m.uv)
    return gt


def test_animate_identical_frames(tmp_path):
    _animate_setup(tmp_path, [(k, np.zeros(3)) for k in range(3)])
    assert _run("animate", "--canonical", tmp_path / "canon", "--frames", tmp_path / "frames", "--cameras",
                tmp_path / "c.json", "--out", tmp_path / "o") == 0
    imgs = [(tmp_path / "o" / f"frame{k:03d}" / "front.png").read_bytes() for k in range(3)]
    assert imgs[0] == imgs[1] == imgs[2]


def test_animate_rigid_motion_moves_splats_with_mesh(tmp_path):
    shift = np.array([0.25, -0.1, 0.0])
    gt = _animate_setup(tmp_path, [(0, np.zeros(3)), (1, shift)])
    assert _run("animate", "--canonical", tmp_path / "canon", "--frames", tmp_path / "frames", "--cameras",
                tmp_path / "c.json", "--out", tmp_path / "o", "--mask", "splats", "--format", "heramap") == 0
    cam = _front_camera(64, 60.0)

    def centroid(img):
        w = img.sum(axis=2)
        ys, xs = np.mgrid[:img.shape[0], :img.shape[1]]
        return np.array([(w * xs).sum(), (w * ys).sum()]) / w.sum()

    a = centroid(load_image(tmp_path / "o" / "frame000" / "front.heramap"))
    b = centroid(load_image(tmp_path / "o" / "frame001" / "front.heramap"))
    c = gt.mesh.vertices.mean(axis=0)
    expect = project_point(cam, c + shift)[0] - project_point(cam, c)[0]
    assert np.abs((b - a) - expect).max() < 1.0


def test_animate_missing_frame(tmp_path, capsys):
    _animate_setup(tmp_path, [(0, np.zeros(3)), (1, np.zeros(3)), (3, np.zeros(3))])
    assert _run("animate", "--canonical", tmp_path / "canon", "--frames", tmp_path / "frames", "--cameras",
                tmp_path / "c.json", "--out", tmp_path / "o") == 2
    assert "frame002.obj" in capsys.readouterr().err


def test_animate_topology_mismatch(tmp_path, capsys):
    gt = _animate_setup(tmp_path, [(0, np.zeros(3))])
    m = gt.mesh
    save_obj(tmp_path / "frames" / "frame001.obj", m.vertices, m.faces[:1], m.uv[:1])
    assert _run("animate", "--canonical", tmp_path / "canon", "--frames", tmp_path / "frames", "--cameras",
                tmp_path / "c.json", "--out", tmp_path / "o") == 2
    assert "frame001.obj" in capsys.readouterr().err


# --- fit --------------------------------------------------------------------


def _dataset(tmp_path, corrupt=None, nan_init=False):
    gt = toy_ground_truth(num_splats=10)
    cams = [(f"v{i}", c) for i, c in enumerate(ring_cameras(4, size=20))]
    d = tmp_path / "data"
    d.mkdir()
    save_cameras(d / "cameras.json", cams)
    for name, cam in cams:
        save_png(d / f"{name}.png", render(gt, cam))
    if corrupt:
        (d / f"{corrupt}.png").write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    init = toy_ground_truth(num_splats=10)
    init.mesh.texture[:] = 0
    if nan_init:
        init.mesh.texture[:] = np.nan
    save_scene(d / "init", init)
    return d


def _config(tmp_path, text):
    p = tmp_path / "fit.toml"
    p.write_text(text)
    return p


def test_fit_zero_iterations_returns_init(tmp_path):
    d = _dataset(tmp_path)
    cfg = _config(tmp_path, "stage1_iters = 0\ntotal_iters = 0\n")
    assert _run("fit", "--config", cfg, "--dataset", d, "--out", tmp_path / "o") == 0
    a, b = load_scene(d / "init"), load_scene(tmp_path / "o" / "scene")
    np.testing.assert_array_equal(a.mesh.texture, b.mesh.texture)
    np.testing.assert_array_equal(a.rig.local_pos, b.rig.local_pos)
    assert read_metrics_csv(tmp_path / "o" / "metrics.csv") == []


def test_fit_writes_metrics_and_resumes(tmp_path):
    d = _dataset(tmp_path)
    base = "stage1_iters = 2\npsnr_interval = 2\ncheckpoint_interval = 2\n[densify]\nenabled = false\n"
    full = _config(tmp_path, "total_iters = 6\n" + base)
    assert _run("fit", "--config", full, "--dataset", d, "--out", tmp_path / "full", "--holdout", "v3") == 0
    rows = read_metrics_csv(tmp_path / "full" / "metrics.csv")
    assert [r["iter"] for r in rows] == list(range(1, 7))
    assert np.isfinite(rows[-1]["psnr_holdout"])

    short = tmp_path / "short.toml"
    short.write_text("total_iters = 4\n" + base)
    assert _run("fit", "--config", short, "--dataset", d, "--out", tmp_path / "r", "--holdout", "v3") == 0
    assert _run("fit", "--config", full, "--dataset", d, "--out", tmp_path / "r", "--holdout", "v3",
                "--resume") == 0
    a = load_checkpoint(tmp_path / "full" / "checkpoint")
    b = load_checkpoint(tmp_path / "r" / "checkpoint")
    assert a.iteration == b.iteration == 6
    np.testing.assert_array_equal(a.rig.local_pos, b.rig.local_pos)
    np.testing.assert_array_equal(a.scene.mesh.texture, b.scene.mesh.texture)
    assert (tmp_path / "r" / "metrics.csv").read_text() == (tmp_path / "full" / "metrics.csv").read_text()


def test_fit_corrupt_target(tmp_path, capsys):
    d = _dataset(tmp_path, corrupt="v2")
    cfg = _config(tmp_path, "stage1_iters = 0\ntotal_iters = 1\n")
    assert _run("fit", "--config", cfg, "--dataset", d, "--out", tmp_path / "o") == 2
    assert "v2.png" in capsys.readouterr().err


def test_fit_bad_config(tmp_path, capsys):
    d = _dataset(tmp_path)
    cfg = _config(tmp_path, "stage1_iters = 0\nmystery = 1\n")
    assert _run("fit", "--config", cfg, "--dataset", d, "--out", tmp_path / "o") == 2
    assert "fit.toml" in capsys.readouterr().err


def test_fit_numerical_failure_keeps_checkpoint(tmp_path):
    d = _dataset(tmp_path, nan_init=True)
    cfg = _config(tmp_path, "stage1_iters = 1\ntotal_iters = 3\n")
    assert _run("fit", "--config", cfg, "--dataset", d, "--out", tmp_path / "o") == 3
    assert load_checkpoint(tmp_path / "o" / "checkpoint").iteration == 0


# --- metrics and info -------------------------------------------------------


def _image_dirs(tmp_path, a_imgs, b_imgs, ext="heramap"):
    for name, imgs in (("a", a_imgs), ("b", b_imgs)):
        (tmp_path / name).mkdir()
        for i, img in enumerate(imgs):
            save_image(tmp_path / name / f"im{i}.{ext}", img)
    return tmp_path / "a", tmp_path / "b"


def test_metrics_identical(tmp_path, capsys):
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    a, b = _image_dirs(tmp_path, [img, img], [img, img], ext="png")
    assert _run("metrics", "--a", a, "--b", b) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "image,psnr,ssim"
    assert lines[1] == "im0.png,inf,1.000000"
    assert lines[-1] == "mean,inf,1.000000"


def test_metrics_twenty_db(tmp_path, capsys):
    a_img = np.full((12, 12, 3), 0.5)
    a, b = _image_dirs(tmp_path, [a_img], [np.clip(a_img + 0.1, 0, 1)])
    assert _run("metrics", "--a", a, "--b", b) == 0
    row = capsys.readouterr().out.strip().splitlines()[1].split(",")
    assert float(row[1]) == pytest.approx(20.0, abs=1e-5)


def test_metrics_missing_file(tmp_path, capsys):
    img = np.zeros((4, 4, 3))
    a, b = _image_dirs(tmp_path, [img, img], [img])
    assert _run("metrics", "--a", a, "--b", b) == 2
    assert "im1.heramap" in capsys.readouterr().err


def test_info(tmp_path, capsys):
    save_scene(tmp_path / "s", toy_ground_truth(num_splats=5))
    assert _run("info", "--scene", tmp_path / "s") == 0
    out = capsys.readouterr().out
    assert "triangles: 2" in out and "splats: 5" in out and "rigged: yes" in out
