"""Splats parameterized in facet-local frames that follow a deforming mesh."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFacet, InvalidParameter, TopologyMismatch
from .geometry import quat_conjugate, quat_left_matrix, quat_multiply, rotmat_to_quat, sh_degree
from .hybrid import Scene
from .mesh import TexturedMesh
from .splats import SplatSet

MIN_FACET_AREA = 1e-12


@dataclass
class FacetFrames:
    """Per-facet rotation (M, 3, 3), center (M, 3) and mean edge length (M,)."""

    rotation: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    degenerate: np.ndarray

    def __len__(self):
        return len(self.center)

    def __getitem__(self, i):
        return FacetFrames(self.rotation[i], self.center[i], self.scale[i], self.degenerate[i])

    @property
    def quat(self):
        return rotmat_to_quat(self.rotation)


@dataclass
class RiggedSplats:
    """Splats stored in facet-local coordinates (position and scale in units of k_f)."""

    facet_id: np.ndarray
    local_pos: np.ndarray
    local_quats: np.ndarray
    local_log_scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.facet_id = np.asarray(self.facet_id, dtype=np.int64).reshape(-1)
        n = len(self.facet_id)
        self.local_pos = np.asarray(self.local_pos, dtype=np.float64).reshape(n, 3)
        self.local_quats = np.asarray(self.local_quats, dtype=np.float64).reshape(n, 4)
        self.local_log_scales = np.asarray(self.local_log_scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh if sh.ndim == 3 else sh.reshape(n, -1, 3)
        sh_degree(self.sh.shape[1])

    def __len__(self):
        return len(self.facet_id)

    def copy(self) -> "RiggedSplats":
        return RiggedSplats(self.facet_id.copy(), self.local_pos.copy(), self.local_quats.copy(),
                            self.local_log_scales.copy(), self.opacities.copy(), self.sh.copy())

    def subset(self, idx) -> "RiggedSplats":
        return RiggedSplats(self.facet_id[idx], self.local_pos[idx], self.local_quats[idx],
                            self.local_log_scales[idx], self.opacities[idx], self.sh[idx])

    def check_bound(self, num_facets):
        if len(self) and (self.facet_id.min() < 0 or self.facet_id.max() >= num_facets):
            raise InvalidParameter("rigged splat bound to a facet outside the mesh")


def facet_frames(vertices, faces, strict=True) -> FacetFrames:
    """Frames for all facets: columns [edge, normal, edge x normal], vertex-mean center."""
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces, dtype=np.int64)]
    e01 = tri[:, 1] - tri[:, 0]
    e02 = tri[:, 2] - tri[:, 0]
    e12 = tri[:, 2] - tri[:, 1]
    cross = np.cross(e01, e02)
    area2 = np.linalg.norm(cross, axis=1)
    degenerate = ~(0.5 * area2 > MIN_FACET_AREA)
    if strict and degenerate.any():
        raise DegenerateFacet(int(np.flatnonzero(degenerate)[0]))
    len01 = np.linalg.norm(e01, axis=1)
    safe = ~degenerate
    e1 = np.tile([1.0, 0.0, 0.0], (len(tri), 1))
    n = np.tile([0.0, 1.0, 0.0], (len(tri), 1))
    e1[safe] = e01[safe] / len01[safe, None]
    n[safe] = cross[safe] / area2[safe, None]
    R = np.stack([e1, n, np.cross(e1, n)], axis=2)
    k = (len01 + np.linalg.norm(e02, axis=1) + np.linalg.norm(e12, axis=1)) / 3.0
    k = np.where(safe, k, 1.0)
    return FacetFrames(R, tri.mean(axis=1), k, degenerate)


def facet_frame(vertices, faces, i) -> FacetFrames:
    faces = np.asarray(faces, dtype=np.int64)
    return facet_frames(vertices, faces[i:i + 1])[0]


def pose_splats(rigged: RiggedSplats, frames: FacetFrames) -> SplatSet:
    """World splats from facet-local ones."""
    fr = frames[rigged.facet_id]
    k = fr.scale
    means = np.einsum("nij,nj->ni", fr.rotation, rigged.local_pos * k[:, None]) + fr.center
    quats = quat_multiply(rotmat_to_quat(fr.rotation), rigged.local_quats)
    log_scales = rigged.local_log_scales + np.log(k)[:, None]
    opac = np.where(fr.degenerate, -np.inf, rigged.opacities)
    return SplatSet(means, quats, log_scales, opac, rigged.sh.copy())


def pose_splat(rigged: RiggedSplats, frame: FacetFrames) -> SplatSet:
    """Pose splats that all use the single given frame, regardless of facet_id."""
    n = len(rigged)
    frames = FacetFrames(np.repeat(frame.rotation[None], n, 0), np.repeat(frame.center[None], n, 0),
                         np.full(n, float(frame.scale)), np.full(n, bool(frame.degenerate)))
    idx = RiggedSplats(np.arange(n), rigged.local_pos, rigged.local_quats, rigged.local_log_scales,
                       rigged.opacities, rigged.sh)
    return pose_splats(idx, frames)


def bind_splats(world: SplatSet, frames: FacetFrames, facet_id) -> RiggedSplats:
    """Inverse of :func:`pose_splats` for splats assigned to ``facet_id``."""
    facet_id = np.broadcast_to(np.asarray(facet_id, dtype=np.int64), (len(world),)).copy()
    fr = frames[facet_id]
    k = fr.scale
    local = np.einsum("nji,nj->ni", fr.rotation, world.means - fr.center) / k[:, None]
    lq = quat_multiply(quat_conjugate(rotmat_to_quat(fr.rotation)), world.quats)
    return RiggedSplats(facet_id, local, lq, world.log_scales - np.log(k)[:, None],
                        world.opacities.copy(), world.sh.copy())


def bind_splat(world: SplatSet, frame: FacetFrames, facet_id) -> RiggedSplats:
    """Bind splats to one explicit frame (recorded under ``facet_id``)."""
    n = len(world)
    frames = FacetFrames(frame.rotation[None], frame.center[None], np.atleast_1d(frame.scale),
                         np.atleast_1d(frame.degenerate))
    rig = bind_splats(world, frames, np.zeros(n, np.int64))
    rig.facet_id[:] = facet_id
    return rig


def pose_vjp(rigged: RiggedSplats, frames: FacetFrames, d_means, d_quats, d_log_scales):
    """Pull world-space splat gradients back to local position/rotation/log-scale."""
    fr = frames[rigged.facet_id]
    d_local = np.einsum("nji,nj->ni", fr.rotation, d_means) * fr.scale[:, None]
    L = quat_left_matrix(rotmat_to_quat(fr.rotation))
    d_lq = np.einsum("nji,nj->ni", L, d_quats)
    return d_local, d_lq, d_log_scales.copy()


def pose_scene(mesh: TexturedMesh, deformed_vertices, rigged: RiggedSplats, background=None,
               strict=False) -> Scene:
    """Scene for one animation frame: mesh with deformed vertices plus re-posed splats.

    Splats on facets that collapse are hidden; with ``strict`` a collapse raises.
    """
    deformed_vertices = np.asarray(deformed_vertices, dtype=np.float64)
    if deformed_vertices.shape != mesh.vertices.shape:
        raise TopologyMismatch(f"expected {len(mesh.vertices)} vertices, got {len(deformed_vertices)}")
    rigged.check_bound(len(mesh.faces))
    frames = facet_frames(deformed_vertices, mesh.faces, strict=False)
    if strict and len(rigged):
        bad = frames.degenerate[rigged.facet_id]
        if bad.any():
            raise DegenerateFacet(int(rigged.facet_id[np.flatnonzero(bad)[0]]))
    bg = np.zeros(3) if background is None else background
    return Scene(mesh.with_vertices(deformed_vertices), pose_splats(rigged, frames), bg, rig=rigged)
