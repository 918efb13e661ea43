import numpy as np
import pytest

from hera.errors import InvalidParameter, NumericalFailure
from hera.fixtures import quad_mesh, ring_cameras, toy_ground_truth, toy_initialization, toy_texture
from hera.hybrid import Scene, render
from hera.optim.config import FitConfig
from hera.optim.fit import fit, scene_extent
from hera.splats import SplatSet


def _mesh_problem(n_views=8, size=32):
    tex, opa = toy_texture(8, 1)
    gt = Scene(quad_mesh(tex_res=8, texture=tex, opacity=opa), SplatSet.empty(1), [0.1, 0.1, 0.1])
    data = [(c, render(gt, c)) for c in ring_cameras(n_views, size=size, elevation_deg=35)]
    init = Scene(quad_mesh(tex_res=8), SplatSet.empty(1), [0.1, 0.1, 0.1])
    return init, data


def _toy(size=24, views=4):
    gt = toy_ground_truth(num_splats=15)
    data = [(c, render(gt, c)) for c in ring_cameras(views, size=size)]
    return toy_initialization(gt, num_splats=6), data


def test_zero_iterations_returns_init():
    init, data = _toy()
    res = fit(init, data, FitConfig(stage1_iters=0, total_iters=0))
    np.testing.assert_array_equal(res.scene.mesh.texture, init.mesh.texture)
    np.testing.assert_allclose(res.scene.splats.means, init.splats.means, atol=1e-12)
    assert res.metrics == []


def test_fit_is_deterministic_and_resumable():
    init, data = _toy()
    cfg = FitConfig(stage1_iters=3, total_iters=12, densify={"start_iter": 4, "interval": 4, "grad_threshold": 0.0})
    a = fit(init, data, cfg)
    b = fit(init, data, cfg)
    np.testing.assert_array_equal(a.scene.splats.means, b.scene.splats.means)
    np.testing.assert_array_equal(a.scene.mesh.texture, b.scene.mesh.texture)
    assert len(a.scene.splats) > len(init.splats)
    # stop after 7 iterations, then continue to 12 from the returned state
    half = fit(init, data, FitConfig(stage1_iters=3, total_iters=7,
                                      densify={"start_iter": 4, "interval": 4, "grad_threshold": 0.0,
                                               "stop_iter": 6}))
    rest = fit(init, data, cfg, state=half.state)
    np.testing.assert_array_equal(rest.scene.splats.means, a.scene.splats.means)
    np.testing.assert_array_equal(rest.scene.mesh.opacity, a.scene.mesh.opacity)
    assert [m["loss"] for m in rest.metrics] == [m["loss"] for m in a.metrics]


def test_stage_one_leaves_splats_alone():
    init, data = _toy()
    res = fit(init, data, FitConfig(stage1_iters=5, total_iters=5))
    np.testing.assert_array_equal(res.scene.rig.local_pos, init.rig.local_pos)
    assert not np.array_equal(res.scene.mesh.texture, init.mesh.texture)


def test_non_finite_loss_raises():
    init, data = _toy()
    init.mesh.texture[:] = np.nan
    with pytest.raises(NumericalFailure):
        fit(init, data, FitConfig(stage1_iters=1, total_iters=2))


def test_empty_dataset():
    init, _ = _toy()
    with pytest.raises(InvalidParameter):
        fit(init, [], FitConfig(stage1_iters=0, total_iters=1))


def test_scene_extent():
    cams = ring_cameras(8, radius=3.0)
    assert scene_extent(cams) == pytest.approx(1.1 * 3.0 * np.sin(np.radians(25)), rel=1e-9)


@pytest.mark.slow
def test_mesh_only_fit_reaches_40db():
    init, data = _mesh_problem()
    res = fit(init, data, FitConfig(stage1_iters=2000, total_iters=2000, psnr_interval=0), holdout=data)
    assert res.metrics[-1]["psnr_holdout"] >= 40.0
