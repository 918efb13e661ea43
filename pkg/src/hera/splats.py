"""Gaussian splat sets and their tile-binned screen-space preparation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InvalidParameter
from .geometry import COV2D_FLOOR, Camera, projection_jacobian, quat_to_rotmat, sh_basis, sh_degree

TILE = 16
ALPHA_CAP = 0.99
ALPHA_SKIP = 1.0 / 255.0
# Splats whose mean is nearer than this are dropped.
SPLAT_NEAR = 0.01
MIN_RADIUS = 0.1


@dataclass
class SplatSet:
    """Structure-of-arrays Gaussian splats.

    ``log_scales`` and ``opacities`` are stored pre-activation (log and logit);
    ``sh`` is (N, K, 3) with K = (degree + 1)**2.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh if sh.ndim == 3 else sh.reshape(n, -1, 3)
        sh_degree(self.sh.shape[1])

    def __len__(self):
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return sh_degree(self.sh.shape[1])

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def alphas(self):
        return expit(self.opacities)

    @classmethod
    def empty(cls, sh_deg=0):
        k = (sh_deg + 1) ** 2
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k, 3)))

    def copy(self) -> "SplatSet":
        return SplatSet(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                        self.opacities.copy(), self.sh.copy())

    def subset(self, idx) -> "SplatSet":
        return SplatSet(self.means[idx], self.quats[idx], self.log_scales[idx], self.opacities[idx], self.sh[idx])

    def validate(self):
        s = self.scales
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise InvalidParameter("activated scales must be finite and positive")
        for name in ("means", "quats", "sh"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameter(f"non-finite splat {name}")
        if np.any(np.linalg.norm(self.quats, axis=1) == 0):
            raise InvalidParameter("zero quaternion")


@dataclass
class SplatScreen:
    """Per-splat screen data plus tile bins for one camera.

    Arrays are indexed by splat id (length N); entries for dropped splats are
    meaningless and ``visible`` is False there. ``bin_offsets`` / ``bin_ids``
    are a CSR list per tile (row-major tiles), each ascending by (depth, id).
    """

    width: int
    height: int
    visible: np.ndarray
    mean2d: np.ndarray
    depth: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    color_raw: np.ndarray
    view_dir: np.ndarray
    t_cam: np.ndarray
    tile_rect: np.ndarray
    bin_offsets: np.ndarray
    bin_ids: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def tiles_x(self):
        return (self.width + TILE - 1) // TILE

    @property
    def tiles_y(self):
        return (self.height + TILE - 1) // TILE

    def bin(self, tx, ty):
        t = ty * self.tiles_x + tx
        return self.bin_ids[self.bin_offsets[t]:self.bin_offsets[t + 1]]

    def pairs(self) -> set:
        """Set of (tile_x, tile_y, splat_id) for every binned entry."""
        out = set()
        ntx = self.tiles_x
        for t in range(len(self.bin_offsets) - 1):
            for s in self.bin_ids[self.bin_offsets[t]:self.bin_offsets[t + 1]]:
                out.add((t % ntx, t // ntx, int(s)))
        return out


def splat_covariances(splats: SplatSet):
    rot = quat_to_rotmat(splats.quats)
    M = rot * splats.scales[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def rasterize_splats(splats: SplatSet, camera: Camera) -> SplatScreen:
    """Project splats, evaluate their colors and bin them into 16x16 tiles."""
    n = len(splats)
    W, H = camera.width, camera.height
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    t_cam = camera.to_camera(splats.means)
    depth = t_cam[:, 2].copy()
    front = depth > SPLAT_NEAR
    safe = np.where(front[:, None], t_cam, np.array([0.0, 0.0, 1.0]))

    mean2d = np.stack([camera.fx * safe[:, 0] / safe[:, 2] + camera.cx,
                       camera.fy * safe[:, 1] / safe[:, 2] + camera.cy], axis=1)
    T = projection_jacobian(camera, safe) @ camera.R
    cov3d = splat_covariances(splats)
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2) + COV2D_FLOOR * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    small = front & (radius < MIN_RADIUS)

    ext_x = 3.0 * np.sqrt(a)
    ext_y = 3.0 * np.sqrt(c)
    x_lo = mean2d[:, 0] - ext_x
    x_hi = mean2d[:, 0] + ext_x
    y_lo = mean2d[:, 1] - ext_y
    y_hi = mean2d[:, 1] + ext_y
    on_screen = (x_hi >= 0) & (x_lo < W) & (y_hi >= 0) & (y_lo < H)
    visible = front & ~small & on_screen & np.isfinite(x_lo + x_hi + y_lo + y_hi)

    tile_rect = np.zeros((n, 4), np.int64)
    with np.errstate(invalid="ignore"):
        tile_rect[:, 0] = np.floor(np.maximum(x_lo, 0) / TILE).clip(0, ntx - 1)
        tile_rect[:, 1] = np.floor(np.minimum(x_hi, 1e12) / TILE).clip(0, ntx - 1)
        tile_rect[:, 2] = np.floor(np.maximum(y_lo, 0) / TILE).clip(0, nty - 1)
        tile_rect[:, 3] = np.floor(np.minimum(y_hi, 1e12) / TILE).clip(0, nty - 1)
    tile_rect[~visible] = [0, -1, 0, -1]

    dirs = splats.means - camera.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True).clip(1e-30)
    basis = sh_basis(splats.sh_degree, dirs)
    color_raw = np.einsum("nk,nkc->nc", basis, splats.sh) + 0.5
    color = np.maximum(color_raw, 0.0)

    bin_offsets, bin_ids = _bin(tile_rect, depth, ntx, nty)
    diag = {
        "dropped_behind": int((~front).sum()),
        "dropped_small": int(small.sum()),
        "offscreen": int((front & ~small & ~on_screen).sum()),
        "bin_entries": int(len(bin_ids)),
    }
    return SplatScreen(W, H, visible, mean2d, depth, cov2d, conic, expit(splats.opacities), color, color_raw,
                       dirs, t_cam, tile_rect, bin_offsets, bin_ids, diag)


def _bin(tile_rect, depth, ntx, nty):
    nx = tile_rect[:, 1] - tile_rect[:, 0] + 1
    ny = tile_rect[:, 3] - tile_rect[:, 2] + 1
    counts = np.where((nx > 0) & (ny > 0), nx * ny, 0)
    # depth order first (ties by id), then a stable sort by tile keeps it per tile
    order = np.lexsort((np.arange(len(depth)), depth))
    order = order[counts[order] > 0]
    reps = counts[order]
    ids = np.repeat(order, reps)
    total = int(reps.sum())
    starts = np.repeat(np.cumsum(reps) - reps, reps)
    local = np.arange(total) - starts
    nxr = np.repeat(nx[order], reps)
    tx = np.repeat(tile_rect[order, 0], reps) + local % np.maximum(nxr, 1)
    ty = np.repeat(tile_rect[order, 2], reps) + local // np.maximum(nxr, 1)
    tile = ty * ntx + tx
    perm = np.argsort(tile, kind="stable")
    bin_ids = ids[perm]
    bin_offsets = np.zeros(ntx * nty + 1, np.int64)
    np.cumsum(np.bincount(tile, minlength=ntx * nty), out=bin_offsets[1:])
    return bin_offsets, bin_ids.astype(np.int64)


def splat_alpha(screen: SplatScreen, i: int, pixel) -> float:
    """Capped Gaussian opacity of splat ``i`` at a pixel (col, row) or a sample point.

    Integer pixel indices are sampled at their centers.
    """
    px, py = pixel
    if isinstance(px, (int, np.integer)) and isinstance(py, (int, np.integer)):
        px, py = px + 0.5, py + 0.5
    dx = px - screen.mean2d[i, 0]
    dy = py - screen.mean2d[i, 1]
    A, B, C = screen.conic[i]
    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
    return min(ALPHA_CAP, screen.opacity[i] * np.exp(power))
