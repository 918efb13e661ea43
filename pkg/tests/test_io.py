import json
import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hera.errors import (AssetError, DuplicateName, HeraError, MissingUVs, NonOrthonormalRotation, ParseError,
                         TopologyMismatch, UnsupportedAscii)
from hera.fixtures import quad_mesh, ring_cameras, toy_ground_truth
from hera.geometry import project_point
from hera.hybrid import render
from hera.io import (CameraSet, load_cameras, load_checkpoint, load_frame_sequence, load_image, load_map, load_obj,
                     load_png, load_rig, load_scene, load_splats, load_texture, orthonormalize, read_metrics_csv,
                     save_cameras, save_checkpoint, save_image, save_map, save_obj, save_png16, save_rig,
                     save_scene, save_splats, save_texture, write_metrics_csv)
from hera.optim.config import FitConfig
from hera.optim.fit import fit, init_state
from hera.splats import SplatSet

from fuzz import run_corpus


def _cam_json(**over):
    e = {"name": "a", "width": 8, "height": 6, "fx": 5.0, "fy": 5.0, "cx": 4.0, "cy": 3.0,
         "R": [1, 0, 0, 0, 1, 0, 0, 0, 1], "t": [0, 0, 2]}
    e.update(over)
    return e


def _write_cams(path, entries):
    path.write_text(json.dumps({"cameras": entries}))
    return path


def _ply(props, n, payload):
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    head += [f"property float {p}" for p in props] + ["end_header"]
    return ("\n".join(head) + "\n").encode() + payload


BASE = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
        "rot_0", "rot_1", "rot_2", "rot_3"]


# --- OBJ --------------------------------------------------------------------


def test_quad_obj_fans_into_two_triangles(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3 4/4\n")
    m = load_obj(p)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])
    assert m.uv.reshape(-1, 2).shape == (6, 2)
    np.testing.assert_array_equal(m.uv[1], [[0, 0], [1, 1], [0, 1]])


def test_obj_without_uvs(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(MissingUVs):
        load_obj(p)


def test_obj_parse_error_has_line(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(ParseError) as err:
        load_obj(p)
    assert err.value.line == 2
    p.write_text("v 0 0 0\nvt 0 0\nf 1/1 2/1 3/1\n")
    with pytest.raises(ParseError) as err:
        load_obj(p)
    assert err.value.line == 3


def test_obj_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    V = rng.normal(size=(20, 3))
    F = rng.integers(0, 20, (15, 3))
    uv = rng.uniform(size=(15, 3, 2))
    save_obj(tmp_path / "m.obj", V, F, uv)
    m = load_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(m.vertices, V)
    np.testing.assert_array_equal(m.faces, F)
    np.testing.assert_array_equal(m.uv, uv)


def test_missing_file_is_asset_error(tmp_path):
    with pytest.raises(AssetError) as err:
        load_obj(tmp_path / "nope.obj")
    assert "nope.obj" in str(err.value)


# --- PLY --------------------------------------------------------------------


def test_splat_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    n = 1000
    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    sp = SplatSet(f32(rng.normal(size=(n, 3))), f32(rng.normal(size=(n, 4))), f32(rng.normal(size=(n, 3))),
                  f32(rng.normal(size=n)), f32(rng.normal(size=(n, 16, 3))))
    save_splats(sp, tmp_path / "s.ply")
    back = load_splats(tmp_path / "s.ply")
    for name in ("means", "quats", "log_scales", "opacities", "sh"):
        assert np.array_equal(getattr(back, name), getattr(sp, name)), name


def test_truncated_ply_names_record(tmp_path):
    rng = np.random.default_rng(2)
    sp = SplatSet(rng.normal(size=(10, 3)), rng.normal(size=(10, 4)), rng.normal(size=(10, 3)),
                  rng.normal(size=10), rng.normal(size=(10, 16, 3)))
    save_splats(sp, tmp_path / "s.ply")
    data = (tmp_path / "s.ply").read_bytes()
    record = 62 * 4
    (tmp_path / "t.ply").write_bytes(data[:len(data) - 3 * record - 7])
    with pytest.raises(ParseError) as err:
        load_splats(tmp_path / "t.ply")
    assert err.value.record == 6
    assert "record 6" in str(err.value)


def test_degree_two_ply_is_padded(tmp_path):
    props = BASE[:6] + [f"f_rest_{i}" for i in range(24)] + BASE[6:]
    row = np.arange(len(props), dtype="<f4")
    (tmp_path / "d2.ply").write_bytes(_ply(props, 1, row.tobytes()))
    sp, info = load_splats(tmp_path / "d2.ply", with_info=True)
    assert sp.sh.shape == (1, 16, 3) and info.sh_rest == 24
    # f_rest is channel-major: 8 coefficients of red, then green, then blue
    np.testing.assert_array_equal(sp.sh[0, 1:9, 0], np.arange(6, 14))
    np.testing.assert_array_equal(sp.sh[0, 1:9, 2], np.arange(22, 30))
    assert np.all(sp.sh[0, 9:] == 0)
    np.testing.assert_array_equal(sp.sh[0, 0], [3, 4, 5])


def test_unknown_properties_warn(tmp_path, caplog):
    props = BASE + ["extra_a", "extra_b"]
    (tmp_path / "u.ply").write_bytes(_ply(props, 2, np.ones((2, len(props)), "<f4").tobytes()))
    with caplog.at_level(logging.WARNING):
        sp, info = load_splats(tmp_path / "u.ply", with_info=True)
    assert info.ignored_properties == ["extra_a", "extra_b"]
    assert "2 unknown" in caplog.text
    assert len(sp) == 2


def test_ascii_and_bad_ply(tmp_path):
    p = tmp_path / "a.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(UnsupportedAscii):
        load_splats(p)
    p.write_bytes(_ply(BASE[:5], 1, b"\0" * 20))
    with pytest.raises(ParseError):
        load_splats(p)


# --- cameras ----------------------------------------------------------------


def test_identity_camera(tmp_path):
    cams = load_cameras(_write_cams(tmp_path / "c.json", [_cam_json()]))
    assert cams.names == ["a"]
    np.testing.assert_array_equal(cams["a"].R, np.eye(3))


def test_reflection_rejected(tmp_path):
    with pytest.raises(NonOrthonormalRotation):
        load_cameras(_write_cams(tmp_path / "c.json", [_cam_json(R=[1, 0, 0, 0, 1, 0, 0, 0, -1])]))


def test_small_drift_is_repaired(tmp_path):
    R = (np.eye(3) + 1e-4 * np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]])).ravel().tolist()
    cam = load_cameras(_write_cams(tmp_path / "c.json", [_cam_json(R=R)]))["a"]
    np.testing.assert_allclose(cam.R.T @ cam.R, np.eye(3), atol=1e-14)
    assert orthonormalize(np.eye(3) * 1.01) is None


def test_duplicate_camera_names(tmp_path):
    with pytest.raises(DuplicateName):
        load_cameras(_write_cams(tmp_path / "c.json", [_cam_json(), _cam_json()]))
    with pytest.raises(DuplicateName):
        CameraSet([("x", None), ("x", None)])


@pytest.mark.parametrize("bad", [{"fx": -1}, {"width": 2.5}, {"name": 3}, {"t": [0, 0]}, {"R": [1] * 8},
                                 {"fy": "5"}, {"t": [0, 0, True]}])
def test_camera_field_validation(tmp_path, bad):
    with pytest.raises(ParseError):
        load_cameras(_write_cams(tmp_path / "c.json", [_cam_json(**bad)]))


def test_ring_cameras_see_origin_at_center(tmp_path):
    ring = ring_cameras(16, size=128)
    save_cameras(tmp_path / "ring.json", [(f"cam{i:02d}", c) for i, c in enumerate(ring)])
    cams = load_cameras(tmp_path / "ring.json")
    assert len(cams) == 16
    for c in cams.cameras:
        uv, _ = project_point(c, np.zeros(3))
        assert np.abs(uv - [64, 64]).max() < 0.5


# --- maps, rigs, images -----------------------------------------------------


def test_map_round_trip_and_layout(tmp_path):
    a = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    save_map(tmp_path / "m.heramap", a)
    raw = (tmp_path / "m.heramap").read_bytes()
    assert raw[:8] == b"HERAMAP1" and struct.unpack("<III", raw[8:20]) == (3, 2, 2)
    # planar: channel 0 of every texel first
    np.testing.assert_array_equal(np.frombuffer(raw[20:44], "<f4"), a[..., 0].ravel())
    np.testing.assert_array_equal(load_map(tmp_path / "m.heramap"), a)
    (tmp_path / "m.heramap").write_bytes(raw[:-1])
    with pytest.raises(ParseError):
        load_map(tmp_path / "m.heramap")


def test_texture_round_trip(tmp_path):
    t = np.random.default_rng(3).normal(size=(4, 5, 4, 3)).astype(np.float32)
    save_texture(tmp_path / "t.heramap", t)
    np.testing.assert_array_equal(load_texture(tmp_path / "t.heramap"), t)
    save_map(tmp_path / "bad.heramap", np.zeros((2, 2, 6)))
    with pytest.raises(ParseError):
        load_texture(tmp_path / "bad.heramap")


def test_png16_texture(tmp_path):
    rgb = np.random.default_rng(4).uniform(size=(3, 4, 3))
    save_png16(tmp_path / "t.png", rgb)
    tex = load_texture(tmp_path / "t.png")
    assert tex.shape == (3, 4, 1, 3)
    np.testing.assert_allclose(tex[:, :, 0] * 0.28209479177387814 + 0.5, rgb, atol=1 / 65535)


def test_rig_round_trip(tmp_path):
    ids = np.array([0, 5, 2**31, 7])
    save_rig(tmp_path / "r.bin", ids)
    np.testing.assert_array_equal(load_rig(tmp_path / "r.bin"), ids)
    (tmp_path / "r.bin").write_bytes(b"HERARIG1" + struct.pack("<I", 3) + b"\0" * 8)
    with pytest.raises(ParseError):
        load_rig(tmp_path / "r.bin")


def test_image_round_trips(tmp_path):
    img = np.random.default_rng(5).uniform(size=(6, 7, 3))
    save_image(tmp_path / "i.heramap", img)
    np.testing.assert_array_equal(load_image(tmp_path / "i.heramap"), img.astype(np.float32))
    save_image(tmp_path / "i.png", img)
    back = load_png(tmp_path / "i.png")
    # 8-bit quantization in the encoded domain
    np.testing.assert_allclose(back ** (1 / 2.2), img ** (1 / 2.2), atol=0.5 / 255 + 1e-12)
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\n garbage")
    with pytest.raises(ParseError):
        load_png(tmp_path / "bad.png")


def test_metrics_csv(tmp_path):
    rows = [{"iter": 1, "loss": 0.5, "psnr_holdout": float("nan"), "num_splats": 3},
            {"iter": 2, "loss": 0.25, "psnr_holdout": 31.5, "num_splats": 4}]
    write_metrics_csv(tmp_path / "m.csv", rows)
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back[1] == rows[1] and np.isnan(back[0]["psnr_holdout"])


# --- bundles ----------------------------------------------------------------


def test_scene_bundle_round_trip(tmp_path):
    gt = toy_ground_truth(num_splats=8)
    save_scene(tmp_path / "s", gt)
    assert (tmp_path / "s" / "rig.bin").exists()
    back = load_scene(tmp_path / "s", gt.background)
    np.testing.assert_array_equal(back.rig.facet_id, gt.rig.facet_id)
    np.testing.assert_allclose(back.splats.means, gt.splats.means, atol=1e-6)
    cam = ring_cameras(1, size=24)[0]
    np.testing.assert_allclose(render(back, cam), render(gt, cam), atol=1e-5)


def test_unrigged_bundle_without_splats(tmp_path):
    from hera.hybrid import Scene

    save_scene(tmp_path / "s", Scene(quad_mesh(), SplatSet.empty(1)))
    (tmp_path / "s" / "splats.ply").unlink()
    back = load_scene(tmp_path / "s")
    assert len(back.splats) == 0 and back.rig is None


def test_frame_sequence_topology(tmp_path):
    m = quad_mesh()
    (tmp_path / "f").mkdir()
    save_obj(tmp_path / "f" / "000.obj", m.vertices, m.faces, m.uv)
    save_obj(tmp_path / "f" / "001.obj", m.vertices[:3], m.faces[:1], m.uv[:1])
    with pytest.raises(TopologyMismatch) as err:
        load_frame_sequence(tmp_path / "f", m)
    assert "001.obj" in str(err.value)


def test_checkpoint_round_trip(tmp_path):
    gt = toy_ground_truth(num_splats=8)
    data = [(c, render(gt, c)) for c in ring_cameras(3, size=16)]
    cfg = FitConfig(stage1_iters=1, total_iters=4)
    res = fit(gt, data, cfg)
    save_checkpoint(tmp_path / "ck", res.state)
    st = load_checkpoint(tmp_path / "ck", gt.background)
    assert st.iteration == 4
    np.testing.assert_array_equal(st.rig.local_pos, res.state.rig.local_pos)
    np.testing.assert_array_equal(st.scene.mesh.texture, res.state.scene.mesh.texture)
    for name in res.state.adam.m:
        np.testing.assert_array_equal(st.adam.m[name], res.state.adam.m[name])
        assert st.adam.t[name] == res.state.adam.t[name]
    assert st.rng.integers(1 << 30) == res.state.rng.integers(1 << 30)
    # a second save replaces the first atomically
    save_checkpoint(tmp_path / "ck", init_state(gt, cfg))
    assert load_checkpoint(tmp_path / "ck").iteration == 0
    assert not (tmp_path / "ck.tmp").exists()


# --- totality ---------------------------------------------------------------


def test_fuzz_corpus_small(tmp_path):
    typed, accepted, crashes = run_corpus(tmp_path, 600, seed=1)
    assert crashes == []
    assert typed > 0


@settings(max_examples=150, deadline=None)
@given(st.binary(max_size=400), st.sampled_from(["obj", "ply", "json", "heramap", "bin"]))
def test_loaders_are_total(tmp_path_factory, data, kind):
    path = tmp_path_factory.mktemp("fz") / f"x.{kind}"
    path.write_bytes(data)
    loader = {"obj": load_obj, "ply": load_splats, "json": load_cameras, "heramap": load_map, "bin": load_rig}[kind]
    try:
        loader(path)
    except HeraError:
        pass
