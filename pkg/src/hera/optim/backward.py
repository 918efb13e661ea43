"""Reverse-mode derivatives of the hybrid render.

Sorting, classification and the alpha skip/cap are treated as piecewise
constant; everything else is differentiated exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import MissingForwardState, ShapeMismatch
from ..geometry import quat_to_rotmat, quat_to_rotmat_vjp, sh_basis, sh_basis_jacobian
from ..hybrid import RenderResult, Scene, blend_adjoint
from ..mesh import bilinear_taps


@dataclass
class Gradients:
    texture: np.ndarray
    opacity: np.ndarray
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    # per-splat norm of dL/d(2D mean) in NDC units, and whether the splat was rasterized
    screen_grad: np.ndarray
    visible: np.ndarray

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, k))) for k in
                   ("texture", "opacity", "means", "quats", "log_scales", "opacities", "sh"))


def _mesh_backward(scene: Scene, state: RenderResult, g_alpha, g_color):
    mesh = scene.mesh
    d_tex = np.zeros_like(mesh.texture)
    d_opa = np.zeros_like(mesh.opacity)
    buf = state.mesh_buffer
    if len(g_alpha) == 0:
        return d_tex, d_opa
    Ht, Wt = mesh.opacity.shape
    rows, cols, w = bilinear_taps(buf.uv, Ht, Wt)
    flat = rows * Wt + cols  # (n, 4)

    raw = np.sum(mesh.opacity[rows, cols] * w, axis=1)
    if mesh.opacity_mode == "clamp":
        d_raw = g_alpha * ((raw > 0) & (raw < 1))
    else:
        s = expit(raw)
        d_raw = g_alpha * s * (1.0 - s)
    d_opa += np.bincount(flat.ravel(), (w * d_raw[:, None]).ravel(), minlength=Ht * Wt).reshape(Ht, Wt)

    basis = sh_basis(mesh.sh_degree, buf.view_dir)  # (n, K)
    coeffs = np.einsum("nt,ntkc->nkc", w, mesh.texture[rows, cols])
    raw_c = np.einsum("nk,nkc->nc", basis, coeffs) + 0.5
    d_c = g_color * (raw_c > 0)
    K = basis.shape[1]
    # d_tex[texel, k, c] += w_t * basis_k * d_c
    contrib = w[:, :, None, None] * basis[:, None, :, None] * d_c[:, None, None, :]  # (n, 4, K, 3)
    idx = (flat[:, :, None, None] * (K * 3) + np.arange(K)[None, None, :, None] * 3
           + np.arange(3)[None, None, None, :])
    d_tex += np.bincount(idx.ravel(), contrib.ravel(), minlength=Ht * Wt * K * 3).reshape(d_tex.shape)
    return d_tex, d_opa


def _splat_backward(scene: Scene, state: RenderResult, g_entry, entry_ids):
    splats = scene.splats
    n = len(splats)
    cam = state.camera
    scr = state.screen
    d_means = np.zeros((n, 3))
    d_quats = np.zeros((n, 4))
    d_ls = np.zeros((n, 3))
    d_op = np.zeros(n)
    d_sh = np.zeros_like(splats.sh)
    screen_grad = np.zeros(n)
    if n == 0 or state.options.mask == "mesh":
        return d_means, d_quats, d_ls, d_op, d_sh, screen_grad

    g = np.zeros((n, 9))
    for c in range(9):
        g[:, c] = np.bincount(entry_ids, g_entry[:, c], minlength=n)
    vis = scr.visible
    d_m2d = g[:, 0:2]
    gA, gB, gC = g[:, 2], g[:, 3], g[:, 4]
    d_opac_act = g[:, 5]
    d_color = g[:, 6:9]
    screen_grad = np.linalg.norm(d_m2d * np.array([0.5 * cam.width, 0.5 * cam.height]), axis=1)

    d_op = d_opac_act * scr.opacity * (1.0 - scr.opacity)

    # color: c = max(sum_k Y_k(dir) sh_k + 0.5, 0), dir = (mu - o) / |mu - o|
    d_raw = d_color * (scr.color_raw > 0)
    deg = splats.sh_degree
    basis = sh_basis(deg, scr.view_dir)
    d_sh = basis[:, :, None] * d_raw[:, None, :]
    jac = sh_basis_jacobian(deg, scr.view_dir)  # (n, K, 3)
    d_dir = np.einsum("nkc,nc,nki->ni", splats.sh, d_raw, jac)
    v = splats.means - cam.center
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    dirs = scr.view_dir
    d_means += (d_dir - dirs * np.sum(d_dir * dirs, axis=1, keepdims=True)) / vn

    # conic = inverse(cov2d); gradient w.r.t. the full 2x2 conic matrix
    Gc = np.empty((n, 2, 2))
    Gc[:, 0, 0] = gA
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * gB
    Gc[:, 1, 1] = gC
    Cm = np.empty((n, 2, 2))
    Cm[:, 0, 0] = scr.conic[:, 0]
    Cm[:, 0, 1] = Cm[:, 1, 0] = scr.conic[:, 1]
    Cm[:, 1, 1] = scr.conic[:, 2]
    d_cov2 = -Cm @ Gc @ Cm

    t = np.where(vis[:, None], scr.t_cam, np.array([0.0, 0.0, 1.0]))
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2
    Rc = cam.R
    T = J @ Rc
    rot = quat_to_rotmat(splats.quats)
    s = splats.scales
    M = rot * s[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)

    d_cov3 = np.swapaxes(T, 1, 2) @ d_cov2 @ T
    d_T = 2.0 * d_cov2 @ T @ cov3
    d_J = d_T @ Rc.T
    d_t = np.zeros((n, 3))
    d_t[:, 0] = d_J[:, 0, 2] * (-fx / tz**2) + d_m2d[:, 0] * fx / tz
    d_t[:, 1] = d_J[:, 1, 2] * (-fy / tz**2) + d_m2d[:, 1] * fy / tz
    d_t[:, 2] = (d_J[:, 0, 0] * (-fx / tz**2) + d_J[:, 0, 2] * (2 * fx * tx / tz**3)
                 + d_J[:, 1, 1] * (-fy / tz**2) + d_J[:, 1, 2] * (2 * fy * ty / tz**3)
                 - d_m2d[:, 0] * fx * tx / tz**2 - d_m2d[:, 1] * fy * ty / tz**2)
    d_means += d_t @ Rc

    d_M = 2.0 * d_cov3 @ M
    d_s = np.sum(d_M * rot, axis=1)
    d_ls = d_s * s
    d_rot = d_M * s[:, None, :]
    d_quats = quat_to_rotmat_vjp(splats.quats, d_rot)

    hidden = ~vis
    for arr in (d_means, d_quats, d_ls, d_op, d_sh, screen_grad):
        arr[hidden] = 0.0
    return d_means, d_quats, d_ls, d_op, d_sh, screen_grad


def _same_camera(a, b):
    if a is b:
        return True
    return (np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
            and (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height))


def backward_render(scene: Scene, camera, d_image, state: RenderResult = None) -> Gradients:
    """Gradients of a scalar loss given dL/d(image) and the forward state of the same render."""
    if state is None:
        raise MissingForwardState("backward_render needs the RenderResult of the forward pass")
    if not _same_camera(state.camera, camera):
        raise MissingForwardState("forward state was produced for a different camera")
    if state.num_splats != (len(scene.splats) if state.options.mask != "mesh" else 0):
        raise MissingForwardState("forward state does not match the scene's splats")
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != state.image.shape:
        raise ShapeMismatch(f"d_image has shape {d_image.shape}, expected {state.image.shape}")
    g_alpha, g_color, g_entry, entry_ids = blend_adjoint(state, d_image)
    d_tex, d_opa = _mesh_backward(scene, state, g_alpha, g_color)
    n = len(scene.splats)
    if state.options.mask == "mesh":
        z = np.zeros
        return Gradients(d_tex, d_opa, z((n, 3)), z((n, 4)), z((n, 3)), z(n), np.zeros_like(scene.splats.sh),
                         z(n), np.zeros(n, bool))
    d_means, d_quats, d_ls, d_op, d_sh, sg = _splat_backward(scene, state, g_entry, entry_ids)
    return Gradients(d_tex, d_opa, d_means, d_quats, d_ls, d_op, d_sh, sg, state.screen.visible.copy())
