"""Hybrid mesh + splat rasterization with stable depth sorting.

Every splat is classified once per frame against the front mesh surface
(interpolated at the splat's projected mean). Per pixel, mesh fragments and
splat contributions are merged into one ordered list and alpha-blended front
to back.

Merge order is expressed through *slots*: with ``k`` mesh fragments at a
pixel, slot ``s`` holds the splats composited right before mesh fragment
``s`` (slot ``k`` is after the last one). Within a slot splats keep their
(depth, id) order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import InvalidParameter
from .geometry import Camera
from .mesh import FragmentBuffer, TexturedMesh, front_depth, rasterize_mesh
from .splats import ALPHA_CAP, ALPHA_SKIP, TILE, SplatScreen, SplatSet, rasterize_splats

FRONT, BEHIND, DIRECT = 0, 1, 2
CLASS_NAMES = {FRONT: "FrontOfMesh", BEHIND: "BehindMesh", DIRECT: "DirectCompare"}
T_EPS = 1e-4
DEFAULT_LAMBDA = 0.05

MASKS = ("both", "mesh", "splats")
SORT_MODES = ("stable", "legacy")


@dataclass
class Scene:
    mesh: TexturedMesh
    splats: SplatSet
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rig: object = None

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.mesh is None:
            self.mesh = TexturedMesh.empty()
        if self.splats is None:
            self.splats = SplatSet.empty()


@dataclass(frozen=True)
class RenderOptions:
    lam: float = DEFAULT_LAMBDA
    sort_mode: str = "stable"
    mask: str = "both"
    view_dir_mode: str = "ray"

    def __post_init__(self):
        if self.sort_mode not in SORT_MODES:
            raise InvalidParameter(f"sort_mode must be one of {SORT_MODES}")
        if self.mask not in MASKS:
            raise InvalidParameter(f"mask must be one of {MASKS}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InvalidParameter("lambda must be a finite non-negative distance")


@dataclass
class SplatMeshClass:
    kind: int
    reference_depth: float = 0.0

    @property
    def name(self):
        return CLASS_NAMES[self.kind]


@dataclass
class HybridFragment:
    depth: float
    alpha: float
    color: np.ndarray
    source: str
    index: int


@dataclass
class RenderResult:
    """Rendered image plus the forward state the backward pass needs."""

    image: np.ndarray
    final_T: np.ndarray
    weight_sum: np.ndarray
    mesh_buffer: FragmentBuffer
    screen: SplatScreen
    classes: np.ndarray
    reference_depth: np.ndarray
    depth_map: np.ndarray
    options: RenderOptions
    camera: Camera
    background: np.ndarray
    num_splats: int


def set_threads(n=None):
    """Set the numba worker count; falls back to HERA_THREADS, then all cores."""
    if n is None:
        env = os.environ.get("HERA_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# --- classification ---------------------------------------------------------


def _depth_taps(depth_map, px, py):
    H, W = depth_map.shape
    x = np.asarray(px, dtype=np.float64) - 0.5
    y = np.asarray(py, dtype=np.float64) - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    c0 = np.clip(x0, 0, W - 1).astype(np.int64)
    c1 = np.clip(x0 + 1, 0, W - 1).astype(np.int64)
    r0 = np.clip(y0, 0, H - 1).astype(np.int64)
    r1 = np.clip(y0 + 1, 0, H - 1).astype(np.int64)
    taps = np.stack([depth_map[r0, c0], depth_map[r0, c1], depth_map[r1, c0], depth_map[r1, c1]], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return taps, w


def classify_points(mean2d, depth, depth_map):
    """Vectorized classification of projected splat means against a front-depth image.

    Returns (classes, reference_depth); reference depth is 0 for DirectCompare.
    """
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    H, W = depth_map.shape
    px, py = mean2d[:, 0], mean2d[:, 1]
    inside = (px >= 0) & (px < W) & (py >= 0) & (py < H)
    cls = np.full(len(depth), BEHIND, np.int64)
    ref = np.zeros(len(depth))
    if not inside.any():
        return cls, ref
    taps, w = _depth_taps(depth_map, px[inside], py[inside])
    hole = np.any(taps == 0, axis=1)
    interp = np.sum(taps * w, axis=1)
    sub = np.where(hole, DIRECT, np.where(depth[inside] < interp, FRONT, BEHIND))
    cls[inside] = sub
    ref[inside] = np.where(hole, 0.0, interp)
    return cls, ref


def classify_splat(mu, d_g, depth_map, camera: Camera, lam=DEFAULT_LAMBDA) -> SplatMeshClass:
    """Classify one splat mean against the rasterized front-depth image.

    ``lam`` does not enter here; the per-pixel override happens while merging.
    """
    pc = camera.to_camera(mu)
    if not pc[2] > 0:
        raise InvalidParameter("splat behind camera must be excluded before classification")
    pix = np.array([camera.fx * pc[0] / pc[2] + camera.cx, camera.fy * pc[1] / pc[2] + camera.cy])
    cls, ref = classify_points(pix[None], [d_g], np.asarray(depth_map, dtype=np.float64))
    return SplatMeshClass(int(cls[0]), float(ref[0]))


# --- reference per-pixel merge and blend ------------------------------------


def splat_slot(cls, d_g, mesh_depths, lam, legacy=False):
    """Slot of a splat among ``mesh_depths`` (ascending) at one pixel."""
    k = len(mesh_depths)
    if k == 0:
        return 0
    below = int(np.searchsorted(mesh_depths, d_g, side="right"))
    if legacy:
        return below
    if cls == FRONT and mesh_depths[0] < d_g - lam:
        cls = BEHIND
    if cls == FRONT:
        return 0
    if cls == BEHIND:
        return max(1, below)
    return below


def merge_fragments(mesh_list, splat_hits, lam=DEFAULT_LAMBDA, legacy=False):
    """Merge one pixel's mesh fragments and splat hits into blending order.

    ``mesh_list``: sequence of (depth, alpha, color) ascending by depth.
    ``splat_hits``: sequence of (splat_id, alpha, color, d_g, cls) ascending by
    (d_g, splat_id). Returns a list of :class:`HybridFragment`.
    """
    depths = np.array([m[0] for m in mesh_list], dtype=np.float64)
    k = len(mesh_list)
    by_slot = [[] for _ in range(k + 1)]
    for sid, alpha, color, d_g, cls in splat_hits:
        by_slot[splat_slot(cls, d_g, depths, lam, legacy)].append(
            HybridFragment(float(d_g), float(alpha), np.asarray(color, float), "splat", int(sid)))
    out = []
    for s in range(k + 1):
        out.extend(by_slot[s])
        if s < k:
            d, a, c = mesh_list[s][:3]
            out.append(HybridFragment(float(d), float(a), np.asarray(c, float), "mesh", s))
    return out


def blend(fragments, background) -> np.ndarray:
    """Front-to-back alpha blending with background completion and early exit."""
    color = np.zeros(3)
    T = 1.0
    for f in fragments:
        color += f.color * f.alpha * T
        T *= 1.0 - f.alpha
        if T < T_EPS:
            break
    return color + T * np.asarray(background, dtype=np.float64)


# --- compiled kernels -------------------------------------------------------


# per-tile splat record columns
_MX, _MY, _CA, _CB, _CC, _LSKIP, _OPAC, _DEPTH, _CLS, _Y0, _Y1 = range(11)
# slack on the support box, far above its rounding error
_BOX_SLACK = 1e-6


@numba.njit(cache=True)
def _gather_tile(blo, bhi, b_ids, s_mean, s_conic, s_opac, s_depth, s_cls):
    """Contiguous copy of the splat records binned to one tile.

    ``_LSKIP`` is log(1/255 / opacity): a splat is skipped at a pixel when its
    Gaussian exponent falls below it, which avoids an exp per far-away entry.
    ``_Y0, _Y1`` bound the rows of the ellipse where the exponent reaches
    ``_LSKIP``; no pixel center outside that band can pass the skip test.
    """
    rec = np.empty((bhi - blo, 11))
    for j in range(blo, bhi):
        s = b_ids[j]
        r = j - blo
        rec[r, _MX] = s_mean[s, 0]
        rec[r, _MY] = s_mean[s, 1]
        rec[r, _CA] = s_conic[s, 0]
        rec[r, _CB] = s_conic[s, 1]
        rec[r, _CC] = s_conic[s, 2]
        o = s_opac[s]
        rec[r, _LSKIP] = np.log(ALPHA_SKIP / o) if o > 0.0 else np.inf
        rec[r, _OPAC] = o
        rec[r, _DEPTH] = s_depth[s]
        rec[r, _CLS] = s_cls[s]
        # 0.5 d^T C d <= -lskip  implies  |dy| <= sqrt(-2 lskip * inv(C)_yy)
        a, b, c = s_conic[s, 0], s_conic[s, 1], s_conic[s, 2]
        det = a * c - b * b
        r2 = -2.0 * rec[r, _LSKIP]
        if r2 < 0.0 or det <= 0.0:
            hy = -np.inf
        else:
            hy = np.sqrt(r2 * a / det) * (1.0 + _BOX_SLACK) + _BOX_SLACK
        rec[r, _Y0] = s_mean[s, 1] - hy
        rec[r, _Y1] = s_mean[s, 1] + hy
    return rec


@numba.njit(cache=True)
def _row_lists(rec, py, x0, x1, plist, pcount):
    """Per-pixel candidate lists for the pixel row centered at ``py``, columns x0..x1-1.

    A record lands in pixel x's list when x + 0.5 lies on the chord of its
    support ellipse at this row (widened by a tiny slack), so no pixel it can
    reach is missed. Lists keep the tile's bin order.
    """
    for i in range(x1 - x0):
        pcount[i] = 0
    for jj in range(rec.shape[0]):
        if py < rec[jj, _Y0] or py > rec[jj, _Y1]:
            continue
        a = rec[jj, _CA]
        b = rec[jj, _CB]
        c = rec[jj, _CC]
        dy = py - rec[jj, _MY]
        # exponent >= lskip  <=>  a dx^2 + 2 b dy dx + c dy^2 + 2 lskip <= 0
        q = c * dy * dy + 2.0 * rec[jj, _LSKIP]
        disc = b * b * dy * dy - a * q
        if disc < 0.0:
            if disc < -1e-12 * (b * b * dy * dy + abs(a * q)):
                continue
            disc = 0.0
        mid = rec[jj, _MX] - b * dy / a
        h = np.sqrt(disc) / a
        h = h * (1.0 + _BOX_SLACK) + _BOX_SLACK
        xs = max(x0, int(np.ceil(mid - h - 0.5)))
        xe = min(x1 - 1, int(np.floor(mid + h - 0.5)))
        for x in range(xs, xe + 1):
            i = x - x0
            plist[i, pcount[i]] = jj
            pcount[i] += 1


@numba.njit(cache=True)
def _pixel_sequence(px, py, blo, rec, cand, ncand, mlo, mhi, m_depth, m_alpha, lam, legacy,
                    slot, spower, seq_kind, seq_idx, seq_alpha, seq_T):
    """Ordered blending sequence at one pixel.

    ``rec`` holds the tile's splat records (see :func:`_gather_tile`), in bin
    order; only the first ``ncand`` rows listed in ``cand`` (ascending, see
    :func:`_row_lists`) are considered. Records (kind, index, alpha, transmittance-before) per composited
    fragment; kind 0 is a mesh fragment (index into the mesh CSR), kind 1 a
    splat bin entry (``blo`` + row of ``rec``). Returns (count, final transmittance).
    """
    k = mhi - mlo
    T = 1.0
    n = 0
    if k == 0:
        # no mesh layers: bin order is the blend order
        for ci in range(ncand):
            jj = cand[ci]
            dx = px - rec[jj, _MX]
            dy = py - rec[jj, _MY]
            power = -0.5 * (rec[jj, _CA] * dx * dx + rec[jj, _CC] * dy * dy) - rec[jj, _CB] * dx * dy
            if power < rec[jj, _LSKIP]:
                continue
            a = rec[jj, _OPAC] * np.exp(power)
            if a > ALPHA_CAP:
                a = ALPHA_CAP
            seq_kind[n] = 1
            seq_idx[n] = blo + jj
            seq_alpha[n] = a
            seq_T[n] = T
            n += 1
            T *= 1.0 - a
            if T < T_EPS:
                return n, T
        return n, T
    for ci in range(ncand):
        jj = cand[ci]
        dx = px - rec[jj, _MX]
        dy = py - rec[jj, _MY]
        power = -0.5 * (rec[jj, _CA] * dx * dx + rec[jj, _CC] * dy * dy) - rec[jj, _CB] * dx * dy
        if power < rec[jj, _LSKIP]:
            slot[jj] = -1
            continue
        spower[jj] = power
        dg = rec[jj, _DEPTH]
        below = 0
        while below < k and m_depth[mlo + below] <= dg:
            below += 1
        if legacy:
            slot[jj] = below
            continue
        c = int(rec[jj, _CLS])
        if c == 0 and m_depth[mlo] < dg - lam:
            c = 1
        if c == 0:
            slot[jj] = 0
        elif c == 1:
            slot[jj] = below if below > 1 else 1
        else:
            slot[jj] = below

    for sl in range(k + 1):
        for ci in range(ncand):
            jj = cand[ci]
            if slot[jj] != sl:
                continue
            a = rec[jj, _OPAC] * np.exp(spower[jj])
            if a > ALPHA_CAP:
                a = ALPHA_CAP
            seq_kind[n] = 1
            seq_idx[n] = blo + jj
            seq_alpha[n] = a
            seq_T[n] = T
            n += 1
            T *= 1.0 - a
            if T < T_EPS:
                return n, T
        if sl < k:
            a = m_alpha[mlo + sl]
            seq_kind[n] = 0
            seq_idx[n] = mlo + sl
            seq_alpha[n] = a
            seq_T[n] = T
            n += 1
            T *= 1.0 - a
            if T < T_EPS:
                return n, T
    return n, T


@numba.njit(cache=True)
def _tile_mesh_max(m_off, W, H, x0, x1, y0, y1):
    mx = 0
    for y in range(y0, y1):
        for x in range(x0, x1):
            p = y * W + x
            c = m_off[p + 1] - m_off[p]
            if c > mx:
                mx = c
    return mx


@numba.njit(cache=True, parallel=True)
def _render_kernel(W, H, ntx, nty, m_off, m_depth, m_alpha, m_color,
                   b_off, b_ids, s_mean, s_conic, s_opac, s_color, s_depth, s_cls,
                   lam, legacy, bg, out_img, out_T, out_wsum):
    for t in numba.prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, W)
        y1 = min(y0 + TILE, H)
        blo = b_off[t]
        bhi = b_off[t + 1]
        nb = bhi - blo
        cap = nb + _tile_mesh_max(m_off, W, H, x0, x1, y0, y1)
        slot = np.empty(nb, np.int64)
        spower = np.empty(nb)
        rec = _gather_tile(blo, bhi, b_ids, s_mean, s_conic, s_opac, s_depth, s_cls)
        plist = np.empty((TILE, nb), np.int64)
        pcount = np.zeros(TILE, np.int64)
        seq_kind = np.empty(cap, np.int64)
        seq_idx = np.empty(cap, np.int64)
        seq_alpha = np.empty(cap)
        seq_T = np.empty(cap)
        for y in range(y0, y1):
            _row_lists(rec, y + 0.5, x0, x1, plist, pcount)
            for x in range(x0, x1):
                p = y * W + x
                n, T = _pixel_sequence(x + 0.5, y + 0.5, blo, rec, plist[x - x0], pcount[x - x0], m_off[p],
                                       m_off[p + 1], m_depth, m_alpha, lam, legacy,
                                       slot, spower, seq_kind, seq_idx, seq_alpha, seq_T)
                r = 0.0
                g = 0.0
                b = 0.0
                wsum = 0.0
                for i in range(n):
                    w = seq_alpha[i] * seq_T[i]
                    wsum += w
                    if seq_kind[i] == 0:
                        f = seq_idx[i]
                        r += w * m_color[f, 0]
                        g += w * m_color[f, 1]
                        b += w * m_color[f, 2]
                    else:
                        s = b_ids[seq_idx[i]]
                        r += w * s_color[s, 0]
                        g += w * s_color[s, 1]
                        b += w * s_color[s, 2]
                out_img[y, x, 0] = r + T * bg[0]
                out_img[y, x, 1] = g + T * bg[1]
                out_img[y, x, 2] = b + T * bg[2]
                out_T[y, x] = T
                out_wsum[y, x] = wsum


@numba.njit(cache=True, parallel=True)
def _backward_kernel(W, H, ntx, nty, m_off, m_depth, m_alpha, m_color,
                     b_off, b_ids, s_mean, s_conic, s_opac, s_color, s_depth, s_cls,
                     lam, legacy, bg, d_img, g_mesh_alpha, g_mesh_color, g_entry):
    """Adjoint of the per-pixel blend.

    Writes dL/d(alpha) and dL/d(color) per mesh fragment, and per splat bin
    entry the partials [mean_x, mean_y, conic_a, conic_b, conic_c,
    opacity, r, g, b].
    """
    for t in numba.prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, W)
        y1 = min(y0 + TILE, H)
        blo = b_off[t]
        bhi = b_off[t + 1]
        nb = bhi - blo
        cap = nb + _tile_mesh_max(m_off, W, H, x0, x1, y0, y1)
        slot = np.empty(nb, np.int64)
        spower = np.empty(nb)
        rec = _gather_tile(blo, bhi, b_ids, s_mean, s_conic, s_opac, s_depth, s_cls)
        plist = np.empty((TILE, nb), np.int64)
        pcount = np.zeros(TILE, np.int64)
        seq_kind = np.empty(cap, np.int64)
        seq_idx = np.empty(cap, np.int64)
        seq_alpha = np.empty(cap)
        seq_T = np.empty(cap)
        for y in range(y0, y1):
            _row_lists(rec, y + 0.5, x0, x1, plist, pcount)
            for x in range(x0, x1):
                p = y * W + x
                px = x + 0.5
                py = y + 0.5
                n, T = _pixel_sequence(px, py, blo, rec, plist[x - x0], pcount[x - x0],
                                       m_off[p], m_off[p + 1], m_depth, m_alpha,
                                       lam, legacy, slot, spower, seq_kind, seq_idx, seq_alpha, seq_T)
                gr = d_img[y, x, 0]
                gg = d_img[y, x, 1]
                gb = d_img[y, x, 2]
                # suffix color seen through the transmittance right after fragment i
                Sr = bg[0]
                Sg = bg[1]
                Sb = bg[2]
                f = 0
                s = 0
                for i in range(n - 1, -1, -1):
                    a = seq_alpha[i]
                    Ti = seq_T[i]
                    if seq_kind[i] == 0:
                        f = seq_idx[i]
                        cr = m_color[f, 0]
                        cg = m_color[f, 1]
                        cb = m_color[f, 2]
                    else:
                        s = b_ids[seq_idx[i]]
                        cr = s_color[s, 0]
                        cg = s_color[s, 1]
                        cb = s_color[s, 2]
                    d_alpha = Ti * (gr * (cr - Sr) + gg * (cg - Sg) + gb * (cb - Sb))
                    w = Ti * a
                    if seq_kind[i] == 0:
                        g_mesh_alpha[f] += d_alpha
                        g_mesh_color[f, 0] += w * gr
                        g_mesh_color[f, 1] += w * gg
                        g_mesh_color[f, 2] += w * gb
                    else:
                        j = seq_idx[i]
                        g_entry[j, 6] += w * gr
                        g_entry[j, 7] += w * gg
                        g_entry[j, 8] += w * gb
                        dx = px - s_mean[s, 0]
                        dy = py - s_mean[s, 1]
                        ca = s_conic[s, 0]
                        cbb = s_conic[s, 1]
                        cc = s_conic[s, 2]
                        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cbb * dx * dy
                        gauss = np.exp(power)
                        if s_opac[s] * gauss <= ALPHA_CAP:
                            g_entry[j, 5] += d_alpha * gauss
                            d_power = d_alpha * a
                            g_entry[j, 0] += d_power * (ca * dx + cbb * dy)
                            g_entry[j, 1] += d_power * (cc * dy + cbb * dx)
                            g_entry[j, 2] += -0.5 * dx * dx * d_power
                            g_entry[j, 3] += -dx * dy * d_power
                            g_entry[j, 4] += -0.5 * dy * dy * d_power
                    Sr = a * cr + (1.0 - a) * Sr
                    Sg = a * cg + (1.0 - a) * Sg
                    Sb = a * cb + (1.0 - a) * Sb


@numba.njit(cache=True)
def _one_pixel(x, y, W, ntx, m_off, m_depth, m_alpha, b_off, b_ids, s_mean, s_conic, s_opac,
               s_depth, s_cls, lam, legacy):
    t = (y // TILE) * ntx + (x // TILE)
    p = y * W + x
    blo = b_off[t]
    bhi = b_off[t + 1]
    nb = bhi - blo
    cap = nb + m_off[p + 1] - m_off[p]
    slot = np.empty(nb, np.int64)
    spower = np.empty(nb)
    seq_kind = np.empty(cap, np.int64)
    seq_idx = np.empty(cap, np.int64)
    seq_alpha = np.empty(cap)
    seq_T = np.empty(cap)
    rec = _gather_tile(blo, bhi, b_ids, s_mean, s_conic, s_opac, s_depth, s_cls)
    plist = np.empty((1, nb), np.int64)
    pcount = np.zeros(1, np.int64)
    _row_lists(rec, y + 0.5, x, x + 1, plist, pcount)
    n, T = _pixel_sequence(x + 0.5, y + 0.5, blo, rec, plist[0], pcount[0], m_off[p], m_off[p + 1], m_depth, m_alpha,
                           lam, legacy, slot, spower, seq_kind, seq_idx, seq_alpha, seq_T)
    return seq_kind[:n].copy(), seq_idx[:n].copy(), seq_alpha[:n].copy(), seq_T[:n].copy(), T


# --- pipeline ---------------------------------------------------------------


def _kernel_inputs(res: RenderResult):
    buf = res.mesh_buffer
    scr = res.screen
    mesh_on = res.options.mask != "splats"
    splats_on = res.options.mask != "mesh"
    W, H = res.camera.width, res.camera.height
    if mesh_on and len(buf):
        m = (buf.offsets, buf.depth, buf.alpha, buf.color)
    else:
        m = (np.zeros(W * H + 1, np.int64), np.zeros(0), np.zeros(0), np.zeros((0, 3)))
    if splats_on:
        b = (scr.bin_offsets, scr.bin_ids)
    else:
        b = (np.zeros(len(scr.bin_offsets), np.int64), np.zeros(0, np.int64))
    s = (scr.mean2d, scr.conic, scr.opacity, scr.color, scr.depth, res.classes)
    return m, b, s


def render_forward(scene: Scene, camera: Camera, options: RenderOptions = None) -> RenderResult:
    """Full hybrid pipeline; keeps the state needed by the backward pass."""
    options = options or RenderOptions()
    W, H = camera.width, camera.height
    if options.mask != "splats":
        buf = rasterize_mesh(scene.mesh, camera, options.view_dir_mode)
    else:
        buf = FragmentBuffer.empty(W, H)
    splats = scene.splats if options.mask != "mesh" else SplatSet.empty(scene.splats.sh_degree)
    screen = rasterize_splats(splats, camera)
    dmap = front_depth(buf)
    if options.sort_mode == "stable":
        classes, ref = classify_points(screen.mean2d, screen.depth, dmap)
    else:
        classes = np.full(len(splats), DIRECT, np.int64)
        ref = np.zeros(len(splats))
    res = RenderResult(np.zeros((H, W, 3)), np.ones((H, W)), np.zeros((H, W)), buf, screen, classes, ref,
                       dmap, options, camera, scene.background.copy(), len(splats))
    m, b, s = _kernel_inputs(res)
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    _render_kernel(W, H, ntx, nty, *m, *b, *s, float(options.lam), options.sort_mode == "legacy",
                   res.background, res.image, res.final_T, res.weight_sum)
    return res


def render(scene: Scene, camera: Camera, options: RenderOptions = None, **kw) -> np.ndarray:
    """Render an (H, W, 3) float image. Keyword args build :class:`RenderOptions`."""
    if options is None:
        options = RenderOptions(**kw)
    return render_forward(scene, camera, options).image


def pixel_order(res: RenderResult, x: int, y: int):
    """Blending sequence at pixel (x, y) as a list of ("mesh", facet_id) / ("splat", splat_id)."""
    m, b, s = _kernel_inputs(res)
    ntx = (res.camera.width + TILE - 1) // TILE
    kinds, idx, alphas, Ts, _ = _one_pixel(x, y, res.camera.width, ntx, m[0], m[1], m[2], b[0], b[1],
                                           s[0], s[1], s[2], s[4], s[5], float(res.options.lam),
                                           res.options.sort_mode == "legacy")
    out = []
    for kind, i in zip(kinds, idx):
        if kind == 0:
            out.append(("mesh", int(res.mesh_buffer.facet_id[i])))
        else:
            out.append(("splat", int(b[1][i])))
    return out


def blend_adjoint(res: RenderResult, d_image):
    """Per-fragment and per-splat-entry partials of the loss; see ``_backward_kernel``."""
    m, b, s = _kernel_inputs(res)
    W, H = res.camera.width, res.camera.height
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    g_alpha = np.zeros(len(m[1]))
    g_color = np.zeros((len(m[1]), 3))
    g_entry = np.zeros((len(b[1]), 9))
    d_image = np.ascontiguousarray(d_image, dtype=np.float64).reshape(H, W, 3)
    _backward_kernel(W, H, ntx, nty, *m, *b, *s, float(res.options.lam), res.options.sort_mode == "legacy",
                     res.background, d_image, g_alpha, g_color, g_entry)
    return g_alpha, g_color, g_entry, b[1]
