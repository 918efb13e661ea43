"""Pinhole camera, quaternion/covariance algebra and real spherical harmonics.

All batched helpers take leading batch dimensions and work in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, InvalidParameter

NEAR_EPS = 1e-8
COV2D_FLOOR = 0.3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


@dataclass(frozen=True)
class Camera:
    """World-to-camera pinhole model. ``x_cam = R @ x_world + t``."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidParameter("camera pose must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-5:
            raise InvalidParameter("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameter("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidParameter("image size must be at least 1x1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space ray directions through every pixel center, (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        d = np.stack([gx, gy, np.ones_like(gx)], axis=-1) @ self.R
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    @staticmethod
    def look_at(eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image y grows along ``-up``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return Camera(
            R,
            -R @ eye,
            fx,
            fy,
            width / 2 if cx is None else cx,
            height / 2 if cy is None else cy,
            width,
            height,
        )


def project_point(camera: Camera, p):
    """Return ``(pixel, depth)`` for a world point."""
    x, y, z = camera.to_camera(p)
    if not z > NEAR_EPS:
        raise BehindCamera(f"point at camera depth {z:g} is behind the camera")
    return np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy]), z


def project_points(camera: Camera, points):
    """Batched projection; returns pixels (N, 2), depths (N,). No depth check."""
    pc = camera.to_camera(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * pc[..., 0] / z + camera.cx
        py = camera.fy * pc[..., 1] / z + camera.cy
    return np.stack([px, py], axis=-1), z


# --- quaternions (w, x, y, z) ---------------------------------------------


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for (possibly unnormalized) quaternions, normalizing first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, dR):
    """Pull back dL/dR through ``quat_to_rotmat`` (including the normalization)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = np.moveaxis(dR.reshape(dR.shape[:-2] + (9,)), -1, 0)
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = g
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


def rotmat_to_quat(R) -> np.ndarray:
    """Unit quaternion (w >= 0) for rotation matrices, via the largest-pivot method."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    tr = np.trace(R, axis1=1, axis2=2)
    for i, m in enumerate(R):
        if tr[i] > 0:
            s = 2.0 * np.sqrt(tr[i] + 1.0)
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q.reshape(batch + (4,))


def quat_left_matrix(p) -> np.ndarray:
    """Matrix L(p) with ``p ⊗ q == L(p) @ q``."""
    w, x, y, z = np.moveaxis(np.asarray(p, dtype=np.float64), -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_multiply(p, q) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_left_matrix(p), np.asarray(q, dtype=np.float64))


def quat_conjugate(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


# --- covariance -------------------------------------------------------------


def covariance_3d(rotation, scale) -> np.ndarray:
    """Sigma = R S S^T R^T for quaternion ``rotation`` and positive ``scale``.

    Accepts single or batched inputs.
    """
    q = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
        raise InvalidParameter("non-finite rotation or scale")
    if np.any(np.linalg.norm(q, axis=-1) == 0):
        raise InvalidParameter("zero quaternion")
    M = quat_to_rotmat(q) * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def projection_jacobian(camera: Camera, t_cam) -> np.ndarray:
    """Perspective Jacobian d(pixel)/d(camera point), shape (..., 2, 3)."""
    t_cam = np.asarray(t_cam, dtype=np.float64)
    tx, ty, tz = np.moveaxis(t_cam, -1, 0)
    J = np.zeros(t_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx / tz
    J[..., 0, 2] = -camera.fx * tx / (tz * tz)
    J[..., 1, 1] = camera.fy / tz
    J[..., 1, 2] = -camera.fy * ty / (tz * tz)
    return J


def project_covariance(camera: Camera, mean, cov3d, floor=COV2D_FLOOR) -> np.ndarray:
    """EWA screen-space covariance J W Sigma W^T J^T + floor*I."""
    mean = np.asarray(mean, dtype=np.float64)
    t_cam = camera.to_camera(mean)
    if np.any(~(t_cam[..., 2] > NEAR_EPS)):
        raise BehindCamera("splat mean is behind the camera")
    T = projection_jacobian(camera, t_cam) @ camera.R
    cov2 = T @ np.asarray(cov3d, dtype=np.float64) @ np.swapaxes(T, -1, -2)
    return cov2 + floor * np.eye(2)


# --- spherical harmonics ----------------------------------------------------


def sh_degree(num_coeffs: int) -> int:
    deg = int(round(np.sqrt(num_coeffs))) - 1
    if (deg + 1) ** 2 != num_coeffs or not 0 <= deg <= 3:
        raise InvalidParameter(f"{num_coeffs} is not a valid SH coefficient count")
    return deg


def sh_basis(degree: int, dirs) -> np.ndarray:
    """Real SH basis values (..., (degree+1)**2) at unit directions."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree > 0:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(degree: int, dirs) -> np.ndarray:
    """Partial derivatives of each basis polynomial w.r.t. (x, y, z): (..., K, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [(zero, zero, zero)]
    if degree > 0:
        rows += [(zero, -SH_C1 * one, zero), (zero, zero, SH_C1 * one), (-SH_C1 * one, zero, zero)]
    if degree > 1:
        c = SH_C2
        rows += [
            (c[0] * y, c[0] * x, zero),
            (zero, c[1] * z, c[1] * y),
            (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
            (c[3] * z, zero, c[3] * x),
            (2 * c[4] * x, -2 * c[4] * y, zero),
        ]
    if degree > 2:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6 * c[0] * x * y, c[0] * (3 * xx - 3 * yy), zero),
            (c[1] * y * z, c[1] * x * z, c[1] * x * y),
            (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
            (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
            (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
            (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
            (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(coeffs, view_dir) -> np.ndarray:
    """RGB = sum_k c_k Y_k(dir) + 0.5, clamped below at 0.

    ``coeffs`` has shape (..., K, 3); ``view_dir`` broadcasts against (..., 3).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = sh_basis(sh_degree(coeffs.shape[-2]), view_dir)
    rgb = np.einsum("...k,...kc->...c", basis, coeffs) + 0.5
    return np.maximum(rgb, 0.0)
