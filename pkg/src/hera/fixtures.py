"""Synthetic scenes and camera rigs used by tests, the acceptance suite and demos."""
from __future__ import annotations

import numpy as np

from .geometry import Camera
from .hybrid import Scene
from .mesh import TexturedMesh
from .rigging import RiggedSplats, bind_splats, facet_frames
from .splats import SplatSet


def ring_cameras(n=16, radius=3.0, elevation_deg=25.0, size=128, fov_deg=44.0, target=(0.0, 0.0, 0.0)):
    """``n`` cameras on a cone around the -z axis, all looking at ``target``."""
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    phi = np.radians(elevation_deg)
    cams = []
    for i in range(n):
        th = 2 * np.pi * i / n
        eye = np.array([radius * np.sin(phi) * np.cos(th), radius * np.sin(phi) * np.sin(th), -radius * np.cos(phi)])
        cams.append(Camera.look_at(eye + np.asarray(target), target, [0.0, -1.0, 0.0], f, f, size, size))
    return cams


def quad_mesh(half=1.0, z=0.0, tex_res=16, sh_deg=1, texture=None, opacity=None):
    """Two-triangle square in the plane ``z`` facing -z, uv covering [0, 1]^2."""
    V = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    F = np.array([[0, 1, 2], [0, 2, 3]])
    corner_uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    uv = corner_uv[F]
    k = (sh_deg + 1) ** 2
    if texture is None:
        texture = np.zeros((tex_res, tex_res, k, 3))
    if opacity is None:
        opacity = np.zeros((tex_res, tex_res))
    return TexturedMesh(V, F, uv, texture, opacity)


def toy_texture(tex_res=16, sh_deg=1):
    """Smooth low-frequency SH texture and opacity logits for the quad."""
    k = (sh_deg + 1) ** 2
    u = (np.arange(tex_res) + 0.5) / tex_res
    U, V = np.meshgrid(u, u)
    tex = np.zeros((tex_res, tex_res, k, 3))
    tex[..., 0, 0] = 0.9 * np.sin(2 * np.pi * U)
    tex[..., 0, 1] = 0.9 * np.cos(2 * np.pi * V)
    tex[..., 0, 2] = 0.9 * np.sin(2 * np.pi * (U + V))
    if k > 1:
        tex[..., 1:, :] = 0.05
    opacity = 2.0 + 0.5 * np.cos(2 * np.pi * U)
    return tex, opacity


def toy_ground_truth(num_splats=60, seed=7, tex_res=16, sh_deg=1):
    """Textured quad plus a band of rigged "fuzz" splats hovering over it."""
    rng = np.random.default_rng(seed)
    tex, opa = toy_texture(tex_res, sh_deg)
    mesh = quad_mesh(tex_res=tex_res, sh_deg=sh_deg, texture=tex, opacity=opa)
    x = rng.uniform(-0.9, 0.9, num_splats)
    y = 0.35 + rng.normal(0, 0.08, num_splats)
    z = -rng.uniform(0.02, 0.12, num_splats)
    means = np.stack([x, y, z], axis=1)
    quats = rng.normal(size=(num_splats, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.03, 0.07, (num_splats, 3)))
    opac = rng.uniform(0.5, 2.0, num_splats)
    sh = np.zeros((num_splats, (sh_deg + 1) ** 2, 3))
    sh[:, 0, :] = rng.uniform(-1.2, 1.2, (num_splats, 3))
    world = SplatSet(means, quats, log_scales, opac, sh)
    rig = bind_to_nearest_facet(world, mesh)
    return Scene(mesh, world, np.array([0.1, 0.1, 0.1]), rig=rig)


def bind_to_nearest_facet(world: SplatSet, mesh: TexturedMesh) -> RiggedSplats:
    frames = facet_frames(mesh.vertices, mesh.faces)
    d = np.linalg.norm(world.means[:, None, :] - frames.center[None], axis=2)
    return bind_splats(world, frames, np.argmin(d, axis=1))


def toy_initialization(gt: Scene, num_splats=20, seed=11) -> Scene:
    """Zero UV maps and ``num_splats`` random rigged splats on the same quad."""
    rng = np.random.default_rng(seed)
    mesh = gt.mesh
    init_mesh = TexturedMesh(mesh.vertices, mesh.faces, mesh.uv, np.zeros_like(mesh.texture),
                             np.zeros_like(mesh.opacity))
    means = np.stack([rng.uniform(-0.9, 0.9, num_splats), rng.uniform(-0.9, 0.9, num_splats),
                      -rng.uniform(0.0, 0.15, num_splats)], axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (num_splats, 1))
    log_scales = np.full((num_splats, 3), np.log(0.05))
    sh = np.zeros((num_splats, gt.splats.sh.shape[1], 3))
    world = SplatSet(means, quats, log_scales, np.zeros(num_splats), sh)
    rig = bind_to_nearest_facet(world, init_mesh)
    return Scene(init_mesh, world, gt.background.copy(), rig=rig)


def crossing_fixture(size=64, slope=0.1, splat_depth=1.99):
    """A slanted, half-transparent quad and one wide splat whose depth lies between
    the quad's per-pixel depths across the splat's footprint.

    The quad's depth ranges over roughly 2 +- 0.045 under the splat, so with the
    default lambda the override never fires there.
    """
    f = size / 2
    cam = Camera(np.eye(3), np.zeros(3), f, f, size / 2, size / 2, size, size)
    V = np.array([[-1.0, -1.0, 2 - slope], [1.0, -1.0, 2 + slope], [1.0, 1.0, 2 + slope], [-1.0, 1.0, 2 - slope]])
    F = np.array([[0, 1, 2], [0, 2, 3]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])[F]
    tex = np.zeros((4, 4, 1, 3))
    tex[..., 0, :] = np.array([0.2, 0.4, 0.8]) / 0.28209479177387814 - 0.5 / 0.28209479177387814
    mesh = TexturedMesh(V, F, uv, tex, np.zeros((4, 4)))
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = (np.array([1.0, 0.0, 0.0]) - 0.5) / 0.28209479177387814
    splats = SplatSet(np.array([[0.0, 0.0, splat_depth]]), np.array([[1.0, 0.0, 0.0, 0.0]]),
                      np.log([[0.15, 0.05, 0.01]]), np.array([2.0]), sh)
    return Scene(mesh, splats, np.zeros(3)), cam


def order_changes(result, splat_id=0):
    """Pixels where splat ``splat_id`` and the front mesh fragment blend in a different
    order than at the pixel holding the splat's projected mean; returns (changed, compared)."""
    from .hybrid import pixel_order

    def relation(x, y):
        seq = pixel_order(result, x, y)
        mesh_at = [i for i, s in enumerate(seq) if s[0] == "mesh"]
        if not mesh_at or ("splat", splat_id) not in seq:
            return None
        return seq.index(("splat", splat_id)) < mesh_at[0]

    cx, cy = (int(v) for v in result.screen.mean2d[splat_id])
    ref = relation(cx, cy)
    changed = compared = 0
    for y in range(result.camera.height):
        for x in range(result.camera.width):
            r = relation(x, y)
            if r is None:
                continue
            compared += 1
            changed += int(r != ref)
    return changed, compared


def lambda_fixture(size=33, mesh_depth=1.0, splat_depth=1.10):
    """Center pixel covered by a half-transparent black quad at ``mesh_depth``; a red splat at
    ``splat_depth`` whose mean projects a few pixels to the right, over a far backdrop.

    The splat classifies FrontOfMesh there (backdrop depth 2), so at the center pixel
    only the lambda override decides whether it composites before the near quad.
    """
    f = 30.0
    c = size / 2
    cam = Camera(np.eye(3), np.zeros(3), f, f, c, c, size, size)
    # near quad ends one pixel right of the center pixel
    edge = (np.floor(c) + 1.5 - c) / f * mesh_depth
    near = [[-1.0, -1.0, mesh_depth], [edge, -1.0, mesh_depth], [edge, 1.0, mesh_depth], [-1.0, 1.0, mesh_depth]]
    far = [[-3.0, -3.0, 2.0], [3.0, -3.0, 2.0], [3.0, 3.0, 2.0], [-3.0, 3.0, 2.0]]
    V = np.array(near + far)
    F = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])[F % 4]
    tex = np.full((2, 2, 1, 3), -0.5 / 0.28209479177387814)
    mesh = TexturedMesh(V, F, uv, tex, np.zeros((2, 2)))
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = (np.array([1.0, 0.0, 0.0]) - 0.5) / 0.28209479177387814
    x = 4.5 / f * splat_depth
    splats = SplatSet([[x, 0.0, splat_depth]], [[1.0, 0.0, 0.0, 0.0]], np.log([[0.1, 0.1, 0.1]]), [3.0], sh)
    return Scene(mesh, splats, np.zeros(3)), cam
