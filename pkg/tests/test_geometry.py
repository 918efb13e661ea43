import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hera.errors import BehindCamera, InvalidParameter
from hera.geometry import (SH_C0, Camera, covariance_3d, eval_sh, project_covariance, project_point, project_points,
                           projection_jacobian, quat_multiply, quat_to_rotmat, rotmat_to_quat, sh_basis,
                           sh_basis_jacobian)
from oracles import quat_matrix, sh_color


def identity_camera(size=128):
    return Camera(np.eye(3), np.zeros(3), 100.0, 100.0, 64.0, 64.0, size, size)


def test_on_axis_projection():
    px, z = project_point(identity_camera(), [0, 0, 2])
    np.testing.assert_allclose(px, [64, 64])
    assert z == 2


def test_off_axis_projection():
    px, z = project_point(identity_camera(), [0.5, 0, 2])
    np.testing.assert_allclose(px, [89, 64])
    assert z == 2


def test_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(identity_camera(), [0, 0, -1])
    with pytest.raises(BehindCamera):
        project_point(identity_camera(), [0, 0, 1e-9])


def test_camera_validation():
    with pytest.raises(InvalidParameter):
        Camera(np.diag([1, 1, 1.1]), np.zeros(3), 1, 1, 0, 0, 4, 4)
    with pytest.raises(InvalidParameter):
        Camera(np.eye(3), [0, 0, np.nan], 1, 1, 0, 0, 4, 4)
    with pytest.raises(InvalidParameter):
        Camera(np.eye(3), np.zeros(3), -1, 1, 0, 0, 4, 4)
    with pytest.raises(InvalidParameter):
        Camera(np.eye(3), np.zeros(3), 1, 1, 0, 0, 0, 4)


def test_look_at_centers_target():
    cam = Camera.look_at([1, 2, -3], [0.2, 0.1, 0.3], [0, 1, 0], 80, 80, 64, 48)
    px, z = project_point(cam, [0.2, 0.1, 0.3])
    np.testing.assert_allclose(px, [32, 24], atol=1e-9)
    np.testing.assert_allclose(z, np.linalg.norm(np.array([1, 2, -3]) - [0.2, 0.1, 0.3]))
    np.testing.assert_allclose(cam.center, [1, 2, -3], atol=1e-12)


def test_pixel_rays_hit_their_pixels():
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], [0, 1, 0], 50, 60, 7, 5, cx=3.1, cy=2.2)
    rays = cam.pixel_rays()
    pts = cam.center + 2.5 * rays.reshape(-1, 3)
    px, _ = project_points(cam, pts)
    xs, ys = np.meshgrid(np.arange(7) + 0.5, np.arange(5) + 0.5)
    np.testing.assert_allclose(px, np.stack([xs.ravel(), ys.ravel()], 1), atol=1e-9)


def test_covariance_identity():
    np.testing.assert_allclose(covariance_3d([1, 0, 0, 0], [1, 1, 1]), np.eye(3))


def test_covariance_rotated_z():
    q = [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)]
    np.testing.assert_allclose(covariance_3d(q, [2, 1, 1]), np.diag([1, 4, 1]), atol=1e-12)


def test_covariance_axis_aligned():
    np.testing.assert_allclose(covariance_3d([1, 0, 0, 0], [0.5, 2, 3]), np.diag([0.25, 4, 9]))


def test_covariance_rejects_nan():
    with pytest.raises(InvalidParameter):
        covariance_3d([1, 0, 0, np.nan], [1, 1, 1])


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_quat_matches_oracle(q):
    q = np.array(q)
    if np.linalg.norm(q) < 1e-3:
        return
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R, quat_matrix(q), atol=1e-12)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    q2 = rotmat_to_quat(R)
    np.testing.assert_allclose(quat_to_rotmat(q2), R, atol=1e-10)


def test_quat_multiply_composes_rotations():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, q = rng.normal(size=(2, 4))
        p /= np.linalg.norm(p)
        q /= np.linalg.norm(q)
        np.testing.assert_allclose(quat_to_rotmat(quat_multiply(p, q)), quat_to_rotmat(p) @ quat_to_rotmat(q),
                                   atol=1e-12)


def test_projected_covariance_on_axis():
    cam = identity_camera()
    s2, z = 0.01, 2.0
    cov = project_covariance(cam, [0, 0, z], s2 * np.eye(3), floor=0.0)
    np.testing.assert_allclose(cov, s2 * (100 / z) ** 2 * np.eye(2))


def test_projected_covariance_floor():
    cov = project_covariance(identity_camera(), [0.3, -0.2, 2], np.zeros((3, 3)))
    np.testing.assert_allclose(cov, 0.3 * np.eye(2))


def test_projection_jacobian_matches_differences():
    cam = Camera.look_at([1, -2, -3], [0, 0, 0], [0, 1, 0], 90, 70, 64, 64)
    p = np.array([0.3, 0.2, -0.1])
    t = cam.to_camera(p)
    J = projection_jacobian(cam, t)
    eps = 1e-6
    num = np.zeros((2, 3))
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        hi = np.array([cam.fx * (t + d)[0] / (t + d)[2], cam.fy * (t + d)[1] / (t + d)[2]])
        lo = np.array([cam.fx * (t - d)[0] / (t - d)[2], cam.fy * (t - d)[1] / (t - d)[2]])
        num[:, k] = (hi - lo) / (2 * eps)
    np.testing.assert_allclose(J, num, rtol=1e-6)


@settings(max_examples=50)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.lists(st.floats(-6, 1), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_projected_covariance_positive_definite(q, log_s, mean):
    q = np.array(q)
    if np.linalg.norm(q) < 1e-3:
        return
    cam = Camera.look_at([0, 0, -5], [0, 0, 0], [0, 1, 0], 100, 100, 64, 64)
    cov = project_covariance(cam, mean, covariance_3d(q, np.exp(log_s)))
    assert np.linalg.det(cov) > 0
    assert np.all(np.linalg.eigvalsh(cov) >= 0.3 - 1e-9)


def test_sh_degree0_offset():
    np.testing.assert_allclose(eval_sh(np.zeros((1, 3)), [0, 0, 1]), [0.5, 0.5, 0.5])
    np.testing.assert_allclose(eval_sh(np.ones((1, 3)) / 0.28209479, [0.3, 0.4, 0.866]), [1.5, 1.5, 1.5],
                               atol=1e-8)


def test_sh_zonal_is_odd():
    c = np.zeros((4, 3))
    c[2] = 1.0
    up = eval_sh(c, [0, 0, 1]) - 0.5
    down = eval_sh(c, [0, 0, -1])
    # clamp at 0 hides the negative lobe; compare raw basis too
    assert np.all(up > 0)
    np.testing.assert_allclose(down, 0.5 - up)
    np.testing.assert_allclose(sh_basis(1, [0, 0, 1])[2], -sh_basis(1, [0, 0, -1])[2])


def test_sh_matches_oracle_all_degrees():
    rng = np.random.default_rng(3)
    for deg in range(4):
        k = (deg + 1) ** 2
        for _ in range(10):
            c = rng.normal(size=(k, 3))
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            np.testing.assert_allclose(eval_sh(c, d), sh_color(c, d), atol=1e-12)


def test_sh_basis_jacobian_matches_differences():
    rng = np.random.default_rng(4)
    d = rng.normal(size=3)
    eps = 1e-6
    jac = sh_basis_jacobian(3, d)
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        num = (sh_basis(3, d + e) - sh_basis(3, d - e)) / (2 * eps)
        np.testing.assert_allclose(jac[:, k], num, atol=1e-7)


def test_dc_constant():
    assert abs(SH_C0 - 0.28209479) < 1e-8
