"""Opacity/SH-textured triangle meshes and their all-layer (A-buffer) rasterizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import expit

from .geometry import Camera, sh_basis, sh_degree
from .errors import InvalidParameter

# Vertices closer than this to the camera plane invalidate the whole triangle
# (no near-plane clipping).
MESH_NEAR = 1e-3
SUBPIXEL = 256.0
# Snapped coordinates must keep edge-function products inside int64.
MAX_SCREEN_COORD = float(2**22)


@dataclass
class TexturedMesh:
    """Triangle mesh with per-corner UVs, an SH texture map and an opacity map.

    ``texture`` is (H, W, K, 3) SH coefficients, ``opacity`` is (H, W). With
    ``opacity_mode == "logit"`` opacity texels are logits; with ``"clamp"``
    they are alphas clipped to [0, 1].
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    texture: np.ndarray
    opacity: np.ndarray
    opacity_mode: str = "logit"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 3, 2)
        self.texture = np.asarray(self.texture, dtype=np.float64)
        self.opacity = np.asarray(self.opacity, dtype=np.float64)
        if self.texture.ndim == 3:
            self.texture = self.texture[:, :, None, :]
        self.validate()

    def validate(self):
        n = len(self.vertices)
        if len(self.uv) != len(self.faces):
            raise InvalidParameter("need one uv triple per facet")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= n):
            raise InvalidParameter("facet index out of range")
        if self.uv.size and (self.uv.min() < 0 or self.uv.max() > 1):
            raise InvalidParameter("uv coordinates must lie in [0, 1]")
        if self.texture.ndim != 4 or self.texture.shape[-1] != 3:
            raise InvalidParameter("texture must be (H, W, K, 3)")
        sh_degree(self.texture.shape[2])
        if self.texture.shape[:2] != self.opacity.shape:
            raise InvalidParameter("texture and opacity maps must share dimensions")
        if self.opacity_mode not in ("logit", "clamp"):
            raise InvalidParameter(f"unknown opacity mode {self.opacity_mode!r}")

    @property
    def sh_degree(self) -> int:
        return sh_degree(self.texture.shape[2])

    @classmethod
    def empty(cls, sh_deg=1):
        k = (sh_deg + 1) ** 2
        return cls(np.zeros((0, 3)), np.zeros((0, 3), int), np.zeros((0, 3, 2)),
                   np.zeros((1, 1, k, 3)), np.zeros((1, 1)))

    def with_vertices(self, vertices) -> "TexturedMesh":
        return TexturedMesh(vertices, self.faces, self.uv, self.texture, self.opacity, self.opacity_mode)

    def activate_opacity(self, raw):
        if self.opacity_mode == "clamp":
            return np.clip(raw, 0.0, 1.0)
        return expit(raw)

    def copy(self) -> "TexturedMesh":
        return TexturedMesh(self.vertices.copy(), self.faces.copy(), self.uv.copy(),
                            self.texture.copy(), self.opacity.copy(), self.opacity_mode)


def bilinear_taps(uv, height, width):
    """Texel indices (..., 4, 2) as (row, col) and weights (..., 4) for repeat-addressed sampling.

    Texel (r, c) is centered at uv ((c + 0.5) / W, (r + 0.5) / H).
    """
    uv = np.asarray(uv, dtype=np.float64)
    x = uv[..., 0] * width - 0.5
    y = uv[..., 1] * height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    c0 = np.mod(x0.astype(np.int64), width)
    r0 = np.mod(y0.astype(np.int64), height)
    c1 = np.mod(c0 + 1, width)
    r1 = np.mod(r0 + 1, height)
    rows = np.stack([r0, r0, r1, r1], axis=-1)
    cols = np.stack([c0, c1, c0, c1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return rows, cols, w


@numba.njit(cache=True)
def _sample_rows(texels, uv, out):
    # texels (H, W, C), uv (N, 2); same tap order and weights as bilinear_taps
    H, W, C = texels.shape
    for i in range(uv.shape[0]):
        x = uv[i, 0] * W - 0.5
        y = uv[i, 1] * H - 0.5
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        c0 = int(x0) % W
        r0 = int(y0) % H
        c1 = (c0 + 1) % W
        r1 = (r0 + 1) % H
        w0 = (1 - fx) * (1 - fy)
        w1 = fx * (1 - fy)
        w2 = (1 - fx) * fy
        w3 = fx * fy
        for c in range(C):
            out[i, c] = (texels[r0, c0, c] * w0 + texels[r0, c1, c] * w1 + texels[r1, c0, c] * w2
                         + texels[r1, c1, c] * w3)


def sample_map(texels, uv):
    """Bilinearly sample a texel grid (H, W, ...) at ``uv`` with repeat addressing."""
    texels = np.asarray(texels, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    trail = texels.shape[2:]
    flat = np.ascontiguousarray(texels.reshape(texels.shape[0], texels.shape[1], -1))
    pts = np.ascontiguousarray(uv.reshape(-1, 2))
    out = np.empty((len(pts), flat.shape[2]))
    if len(pts):
        _sample_rows(flat, pts, out)
    return out.reshape(uv.shape[:-1] + trail)


@dataclass
class FragmentBuffer:
    """Per-pixel fragment lists in CSR layout, each list ascending by (depth, facet_id).

    Fragments of pixel ``p = row * width + col`` live in
    ``offsets[p]:offsets[p + 1]``.
    """

    width: int
    height: int
    offsets: np.ndarray
    depth: np.ndarray
    facet_id: np.ndarray
    bary: np.ndarray
    uv: np.ndarray = None
    alpha: np.ndarray = None
    color: np.ndarray = None
    view_dir: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, width, height):
        z = np.zeros(0)
        return cls(width, height, np.zeros(width * height + 1, np.int64), z, np.zeros(0, np.int64),
                   np.zeros((0, 3)), np.zeros((0, 2)), z.copy(), np.zeros((0, 3)), np.zeros((0, 3)),
                   {"degenerate": 0, "near_clipped": 0})

    def __len__(self):
        return len(self.depth)

    @property
    def pixel(self) -> np.ndarray:
        return np.repeat(np.arange(self.width * self.height), np.diff(self.offsets))

    def fragments_at(self, row, col) -> list:
        p = row * self.width + col
        sl = slice(self.offsets[p], self.offsets[p + 1])
        out = []
        for i in range(sl.start, sl.stop):
            out.append({
                "depth": self.depth[i],
                "facet_id": int(self.facet_id[i]),
                "bary": self.bary[i],
                "uv": None if self.uv is None else self.uv[i],
                "alpha": None if self.alpha is None else self.alpha[i],
                "color": None if self.color is None else self.color[i],
            })
        return out


@numba.njit(cache=True)
def _edge_is_top_left(dx, dy):
    # edges run so the interior is on the E >= 0 side with y pointing down
    return dy < 0 or (dy == 0 and dx > 0)


@numba.njit(cache=True)
def _covers(X, Y, px, py):
    """Integer coverage test with the top-left fill rule; either winding."""
    area = (X[1] - X[0]) * (Y[2] - Y[0]) - (Y[1] - Y[0]) * (X[2] - X[0])
    if area == 0:
        return False
    o = (0, 1, 2) if area > 0 else (0, 2, 1)
    for e in range(3):
        a = o[e]
        b = o[(e + 1) % 3]
        dx = X[b] - X[a]
        dy = Y[b] - Y[a]
        E = dx * (py - Y[a]) - dy * (px - X[a])
        if E < 0:
            return False
        if E == 0 and not _edge_is_top_left(dx, dy):
            return False
    return True


@numba.njit(cache=True, parallel=True)
def _raster_pass(width, height, valid, bbox, IX, IY, sx, sy, inv_z, offsets, fill,
                 out_depth, out_facet, out_bary, counts):
    ntri = valid.shape[0]
    for y in numba.prange(height):
        py = np.int64(y) * 256 + 128
        cursor = np.zeros(width, np.int64)
        if fill:
            for x in range(width):
                cursor[x] = offsets[y * width + x]
        for f in range(ntri):
            if not valid[f] or bbox[f, 2] > y or bbox[f, 3] < y:
                continue
            X = IX[f]
            Y = IY[f]
            for x in range(bbox[f, 0], bbox[f, 1] + 1):
                px = np.int64(x) * 256 + 128
                if not _covers(X, Y, px, py):
                    continue
                if not fill:
                    counts[y * width + x] += 1
                    continue
                fxp = x + 0.5
                fyp = y + 0.5
                ax = sx[f, 0]
                ay = sy[f, 0]
                bx = sx[f, 1]
                by = sy[f, 1]
                cx = sx[f, 2]
                cy = sy[f, 2]
                area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
                b0 = ((cx - bx) * (fyp - by) - (cy - by) * (fxp - bx)) / area
                b1 = ((ax - cx) * (fyp - cy) - (ay - cy) * (fxp - cx)) / area
                b2 = 1.0 - b0 - b1
                w0 = b0 * inv_z[f, 0]
                w1 = b1 * inv_z[f, 1]
                w2 = b2 * inv_z[f, 2]
                s = w0 + w1 + w2
                k = cursor[x]
                out_depth[k] = 1.0 / s
                out_facet[k] = f
                out_bary[k, 0] = w0 / s
                out_bary[k, 1] = w1 / s
                out_bary[k, 2] = 1.0 - out_bary[k, 0] - out_bary[k, 1]
                cursor[x] = k + 1


@numba.njit(cache=True, parallel=True)
def _sort_lists(offsets, depth, facet, bary):
    npix = offsets.shape[0] - 1
    for p in numba.prange(npix):
        lo = offsets[p]
        hi = offsets[p + 1]
        # insertion sort on (depth, facet); lists are short
        for i in range(lo + 1, hi):
            d = depth[i]
            f = facet[i]
            b0 = bary[i, 0]
            b1 = bary[i, 1]
            b2 = bary[i, 2]
            j = i - 1
            while j >= lo and (depth[j] > d or (depth[j] == d and facet[j] > f)):
                depth[j + 1] = depth[j]
                facet[j + 1] = facet[j]
                bary[j + 1, 0] = bary[j, 0]
                bary[j + 1, 1] = bary[j, 1]
                bary[j + 1, 2] = bary[j, 2]
                j -= 1
            depth[j + 1] = d
            facet[j + 1] = f
            bary[j + 1, 0] = b0
            bary[j + 1, 1] = b1
            bary[j + 1, 2] = b2


def rasterize_geometry(vertices, faces, camera: Camera) -> FragmentBuffer:
    """Coverage, perspective-correct depth and barycentrics for every layer."""
    W, H = camera.width, camera.height
    nf = len(faces)
    if nf == 0:
        return FragmentBuffer.empty(W, H)
    pc = camera.to_camera(vertices)[faces]  # (M, 3, 3)
    z = pc[..., 2]
    near_bad = np.any(~(z > MESH_NEAR), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = camera.fx * pc[..., 0] / z + camera.cx
        sy = camera.fy * pc[..., 1] / z + camera.cy
    finite = np.all(np.isfinite(sx), axis=1) & np.all(np.isfinite(sy), axis=1)
    in_range = finite & np.all(np.abs(sx) < MAX_SCREEN_COORD, axis=1) & np.all(np.abs(sy) < MAX_SCREEN_COORD, axis=1)
    sx = np.where(in_range[:, None], sx, 0.0)
    sy = np.where(in_range[:, None], sy, 0.0)
    IX = np.round(sx * SUBPIXEL).astype(np.int64)
    IY = np.round(sy * SUBPIXEL).astype(np.int64)
    iarea = (IX[:, 1] - IX[:, 0]) * (IY[:, 2] - IY[:, 0]) - (IY[:, 1] - IY[:, 0]) * (IX[:, 2] - IX[:, 0])
    degenerate = (iarea == 0) & ~near_bad & in_range
    valid = ~near_bad & in_range & ~degenerate
    bbox = np.zeros((nf, 4), np.int64)
    bbox[:, 0] = np.clip(np.ceil(sx.min(1) - 0.5), 0, W)
    bbox[:, 1] = np.clip(np.floor(sx.max(1) - 0.5), -1, W - 1)
    bbox[:, 2] = np.clip(np.ceil(sy.min(1) - 0.5), 0, H)
    bbox[:, 3] = np.clip(np.floor(sy.max(1) - 0.5), -1, H - 1)
    valid &= (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])
    inv_z = np.where(near_bad[:, None], 0.0, 1.0 / np.where(near_bad[:, None], 1.0, z))

    counts = np.zeros(W * H, np.int64)
    offsets = np.zeros(W * H + 1, np.int64)
    dummy_f = np.zeros(0)
    dummy_i = np.zeros(0, np.int64)
    dummy_b = np.zeros((0, 3))
    _raster_pass(W, H, valid, bbox, IX, IY, sx, sy, inv_z, offsets, False,
                 dummy_f, dummy_i, dummy_b, counts)
    np.cumsum(counts, out=offsets[1:])
    n = int(offsets[-1])
    depth = np.empty(n)
    facet = np.empty(n, np.int64)
    bary = np.empty((n, 3))
    _raster_pass(W, H, valid, bbox, IX, IY, sx, sy, inv_z, offsets, True,
                 depth, facet, bary, counts)
    _sort_lists(offsets, depth, facet, bary)
    diag = {"degenerate": int(degenerate.sum()), "near_clipped": int((near_bad | ~in_range).sum())}
    return FragmentBuffer(W, H, offsets, depth, facet, bary, diagnostics=diag)


def shade_fragments(buf: FragmentBuffer, mesh: TexturedMesh, camera: Camera, view_dir_mode="ray"):
    """Fill uv, alpha and color of every fragment from the texture and opacity maps."""
    if len(buf) == 0:
        return buf
    buf.uv = np.einsum("ni,nij->nj", buf.bary, mesh.uv[buf.facet_id])
    if view_dir_mode == "ray":
        buf.view_dir = camera.pixel_rays().reshape(-1, 3)[buf.pixel]
    elif view_dir_mode == "facet":
        centers = mesh.vertices[mesh.faces].mean(axis=1)
        d = centers[buf.facet_id] - camera.center
        buf.view_dir = d / np.linalg.norm(d, axis=1, keepdims=True)
    else:
        raise InvalidParameter(f"unknown view_dir_mode {view_dir_mode!r}")
    buf.alpha = mesh.activate_opacity(sample_map(mesh.opacity, buf.uv))
    coeffs = sample_map(mesh.texture, buf.uv)
    basis = sh_basis(mesh.sh_degree, buf.view_dir)
    buf.color = np.maximum(np.einsum("nk,nkc->nc", basis, coeffs) + 0.5, 0.0)
    return buf


def rasterize_mesh(mesh: TexturedMesh, camera: Camera, view_dir_mode="ray") -> FragmentBuffer:
    """All-layer rasterization: one fragment per covering triangle per pixel, no culling."""
    buf = rasterize_geometry(mesh.vertices, mesh.faces, camera)
    return shade_fragments(buf, mesh, camera, view_dir_mode)


def front_depth(buf: FragmentBuffer) -> np.ndarray:
    """Nearest-layer depth image (H, W); 0 where nothing covers the pixel."""
    out = np.zeros(buf.width * buf.height)
    has = buf.offsets[1:] > buf.offsets[:-1]
    out[has] = buf.depth[buf.offsets[:-1][has]]
    return out.reshape(buf.height, buf.width)
