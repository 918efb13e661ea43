"""Loading and saving of scene assets.

Formats:

* OBJ meshes (``v``, ``vt``, ``f v/vt``), fan-triangulated on load.
* Binary little-endian PLY splats in the common 3DGS layout.
* ``HERAMAP1`` float maps: magic, u32 width, height, channels, then float32
  planes (channel-major, each plane row-major).
* ``HERARIG1`` rig tables: magic, u32 count, then one u32 facet id per splat.
* Camera sets as JSON.

Every loader raises a subclass of :class:`~hera.errors.AssetError` on bad
input and nothing else.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (AssetError, DuplicateName, InvalidParameter, MissingUVs, NonOrthonormalRotation, ParseError,
                     TopologyMismatch, UnsupportedAscii)
from .geometry import SH_C0, Camera
from .hybrid import Scene
from .mesh import TexturedMesh
from .rigging import RiggedSplats
from .splats import SplatSet

log = logging.getLogger(__name__)

MAP_MAGIC = b"HERAMAP1"
RIG_MAGIC = b"HERARIG1"
PLY_SH_REST = 45
ORTHO_TOL = 1e-3


def _guard(path, fn, *args):
    """Run a parser, converting stray low-level failures into ParseError."""
    try:
        return fn(*args)
    except AssetError:
        raise
    except OSError as exc:
        raise AssetError(f"cannot read file: {exc.strerror or exc}", path) from None
    except (ValueError, IndexError, KeyError, TypeError, struct.error, UnicodeDecodeError, OverflowError,
            EOFError, zipfile.BadZipFile, InvalidParameter) as exc:
        raise ParseError(f"malformed content ({exc})", path) from None


# --- OBJ --------------------------------------------------------------------


@dataclass
class ObjMesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray


def _obj_index(tok, count, lineno, path, kind):
    i = int(tok)
    if i < 0:
        i = count + i
    else:
        i -= 1
    if not 0 <= i < count:
        raise ParseError(f"{kind} index {tok} out of range", path, line=lineno)
    return i


def _parse_obj(text, path):
    verts, tex, faces, uvs = [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                xyz = [float(p) for p in parts[1:4]]
                if not all(math.isfinite(c) for c in xyz):
                    raise ValueError("non-finite vertex")
                verts.append(xyz)
            elif tag == "vt":
                if len(parts) < 3:
                    raise ValueError("texture coordinate needs 2 values")
                uv = [float(p) for p in parts[1:3]]
                if not all(0.0 <= c <= 1.0 for c in uv):
                    raise ValueError("uv outside [0, 1]")
                tex.append(uv)
            elif tag == "f":
                corners = parts[1:]
                if len(corners) < 3:
                    raise ValueError("face needs at least 3 corners")
                vi, ti = [], []
                for c in corners:
                    fields = c.split("/")
                    if len(fields) < 2 or fields[1] == "":
                        raise MissingUVs(f"line {lineno}: face corner {c!r} has no texture index", path)
                    vi.append(_obj_index(fields[0], len(verts), lineno, path, "vertex"))
                    ti.append(_obj_index(fields[1], len(tex), lineno, path, "texture"))
                for k in range(1, len(corners) - 1):
                    faces.append([vi[0], vi[k], vi[k + 1]])
                    uvs.append([tex[ti[0]], tex[ti[k]], tex[ti[k + 1]]])
        except ValueError as exc:
            raise ParseError(str(exc), path, line=lineno) from None
    return ObjMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3),
                   np.array(uvs, dtype=np.float64).reshape(-1, 3, 2))


def load_obj(path) -> ObjMesh:
    """Vertices, triangles and per-corner uvs of an OBJ file."""
    def run():
        data = Path(path).read_bytes()
        return _parse_obj(data.decode("utf-8"), path)
    return _guard(path, run)


def save_obj(path, vertices, faces, uv):
    lines = ["# hera mesh"]
    lines += ["v %r %r %r" % tuple(float(c) for c in v) for v in np.asarray(vertices)]
    uv = np.asarray(uv).reshape(-1, 2)
    lines += ["vt %r %r" % (float(a), float(b)) for a, b in uv]
    for i, f in enumerate(np.asarray(faces)):
        lines.append("f " + " ".join(f"{int(f[c]) + 1}/{3 * i + c + 1}" for c in range(3)))
    Path(path).write_text("\n".join(lines) + "\n")


# --- HERAMAP1 / HERARIG1 ----------------------------------------------------


def save_map(path, array):
    """Write an (H, W) or (H, W, C) float array as a HERAMAP1 container."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC + struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(np.moveaxis(a, 2, 0)).astype("<f4").tobytes())


def _parse_map(data, path):
    if len(data) < 20 or data[:8] != MAP_MAGIC:
        raise ParseError("not a HERAMAP1 container", path)
    w, h, c = struct.unpack("<III", data[8:20])
    need = 4 * w * h * c
    if len(data) - 20 != need:
        raise ParseError(f"expected {need} payload bytes, found {len(data) - 20}", path)
    planes = np.frombuffer(data, dtype="<f4", offset=20).reshape(c, h, w)
    return np.moveaxis(planes, 0, 2).astype(np.float64)


def load_map(path) -> np.ndarray:
    """(H, W, C) float64 array from a HERAMAP1 file."""
    return _guard(path, lambda: _parse_map(Path(path).read_bytes(), path))


def save_texture(path, texture):
    texture = np.asarray(texture)
    h, w, k, _ = texture.shape
    save_map(path, texture.reshape(h, w, k * 3))


def load_texture(path) -> np.ndarray:
    """SH texture (H, W, K, 3) from HERAMAP1, or degree 0 from a 16-bit PNG."""
    if str(path).lower().endswith(".png"):
        rgb = load_png16(path)
        return ((rgb - 0.5) / SH_C0)[:, :, None, :]
    m = load_map(path)
    if m.shape[2] % 3:
        raise ParseError(f"texture channel count {m.shape[2]} is not a multiple of 3", path)
    k = m.shape[2] // 3
    if k not in (1, 4, 9, 16):
        raise ParseError(f"{k} SH coefficients per texel is not a valid degree", path)
    return m.reshape(m.shape[0], m.shape[1], k, 3)


def load_png16(path) -> np.ndarray:
    import cv2

    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ParseError("unreadable PNG", path)
    if img.dtype != np.uint16:
        raise ParseError("expected a 16-bit PNG", path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., 2::-1].astype(np.float64) / 65535.0


def save_png16(path, rgb):
    import cv2

    a = np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0, 1) * 65535).astype(np.uint16)
    cv2.imwrite(str(path), a[..., ::-1])


def save_rig(path, facet_id):
    ids = np.asarray(facet_id, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(RIG_MAGIC + struct.pack("<I", len(ids)) + ids.tobytes())


def _parse_rig(data, path):
    if len(data) < 12 or data[:8] != RIG_MAGIC:
        raise ParseError("not a HERARIG1 table", path)
    (n,) = struct.unpack("<I", data[8:12])
    if len(data) - 12 != 4 * n:
        raise ParseError(f"expected {n} facet ids, found {(len(data) - 12) // 4}", path)
    return np.frombuffer(data, dtype="<u4", offset=12).astype(np.int64)


def load_rig(path) -> np.ndarray:
    return _guard(path, lambda: _parse_rig(Path(path).read_bytes(), path))


# --- PLY --------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


@dataclass
class PlyInfo:
    num_records: int
    ignored_properties: list
    sh_rest: int


def _ply_header(data, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("missing PLY header", path)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("unterminated PLY header", path)
    lines = data[:end].decode("ascii").splitlines()
    body_start = nl + 1
    fmt = None
    elements = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else ""
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError("malformed element line", path, line=lineno)
            count = int(parts[2])
            if count < 0:
                raise ParseError("negative element count", path, line=lineno)
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", path, line=lineno)
            if len(parts) != 3 or parts[1] == "list":
                raise ParseError("only scalar properties are supported", path, line=lineno)
            if parts[1] not in _PLY_TYPES:
                raise ParseError(f"unknown property type {parts[1]!r}", path, line=lineno)
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"unexpected header keyword {parts[0]!r}", path, line=lineno)
    if fmt is None:
        raise ParseError("missing format line", path)
    if fmt == "ascii":
        raise UnsupportedAscii("ASCII PLY is not supported", path)
    if fmt != "binary_little_endian":
        raise ParseError(f"unsupported PLY format {fmt!r}", path)
    return elements, body_start


def _parse_ply(data, path):
    elements, offset = _ply_header(data, path)
    vertex = None
    for name, count, props in elements:
        names = [p[0] for p in props]
        if len(set(names)) != len(names):
            raise ParseError(f"duplicate property in element {name!r}", path)
        dtype = np.dtype([(p[0], p[1]) for p in props]) if props else np.dtype([])
        size = dtype.itemsize * count
        if name == "vertex":
            avail = len(data) - offset
            if dtype.itemsize and avail < size:
                raise ParseError("file truncated", path, record=avail // dtype.itemsize)
            vertex = np.frombuffer(data, dtype=dtype, count=count, offset=offset) if count else np.zeros(0, dtype)
            break
        offset += size
    if vertex is None:
        raise ParseError("no vertex element", path)
    fields = set(vertex.dtype.names or ())
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    missing = [r for r in required if r not in fields]
    if missing:
        raise ParseError(f"missing splat properties {missing}", path)
    rest = sorted((f for f in fields if f.startswith("f_rest_")), key=lambda s: int(s[7:]))
    if [int(f[7:]) for f in rest] != list(range(len(rest))):
        raise ParseError("f_rest properties are not contiguous", path)
    if len(rest) not in (0, 9, 24, 45):
        raise ParseError(f"{len(rest)} f_rest properties match no SH degree", path)
    known = set(required) | set(rest) | {"nx", "ny", "nz"}
    ignored = sorted(fields - known)
    if ignored:
        log.warning("%s: ignoring %d unknown PLY properties", path, len(ignored))

    def col(name):
        return vertex[name].astype(np.float64)

    n = len(vertex)
    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    dc = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1)
    per_ch = len(rest) // 3
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = dc
    if per_ch:
        r = np.stack([col(f) for f in rest], axis=1).reshape(n, 3, per_ch)
        sh[:, 1:1 + per_ch, :] = np.swapaxes(r, 1, 2)
    log_scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    quats = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    splats = SplatSet(means, quats, log_scales, col("opacity"), sh)
    return splats, PlyInfo(n, ignored, len(rest))


def load_splats(path, with_info=False):
    """Splats from a binary little-endian 3DGS PLY; SH padded to degree 3."""
    splats, info = _guard(path, lambda: _parse_ply(Path(path).read_bytes(), path))
    return (splats, info) if with_info else splats


def save_splats(splats: SplatSet, path):
    n = len(splats)
    props = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    props += [f"f_rest_{i}" for i in range(PLY_SH_REST)]
    props += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    sh = np.zeros((n, 16, 3))
    sh[:, :splats.sh.shape[1]] = splats.sh
    rest = np.swapaxes(sh[:, 1:, :], 1, 2).reshape(n, PLY_SH_REST)
    cols = np.concatenate([splats.means, np.zeros((n, 3)), sh[:, 0, :], rest, splats.opacities[:, None],
                           splats.log_scales, splats.quats], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(cols.tobytes())


# --- cameras ----------------------------------------------------------------


class CameraSet:
    """Ordered, uniquely named cameras."""

    def __init__(self, entries):
        self.entries = list(entries)
        names = [n for n, _ in self.entries]
        seen = set()
        for n in names:
            if n in seen:
                raise DuplicateName(f"duplicate camera name {n!r}")
            seen.add(n)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, name):
        for n, c in self.entries:
            if n == name:
                return c
        raise KeyError(name)

    @property
    def names(self):
        return [n for n, _ in self.entries]

    @property
    def cameras(self):
        return [c for _, c in self.entries]


def orthonormalize(R, tol=ORTHO_TOL):
    """Nearest rotation to ``R`` if it is within ``tol`` of orthonormal; None otherwise."""
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(R)) or np.abs(R.T @ R - np.eye(3)).max() >= tol or np.linalg.det(R) <= 0:
        return None
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def _num(entry, key, path, idx, positive=False, integer=False):
    v = entry[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"camera {idx}: {key!r} must be a number", path)
    if not math.isfinite(v) or (positive and v <= 0) or (integer and (v != int(v) or v < 1)):
        raise ParseError(f"camera {idx}: invalid {key!r} = {v!r}", path)
    return int(v) if integer else float(v)


def _parse_cameras(data, path):
    try:
        doc = json.loads(data.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path, line=exc.lineno) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("cameras"), list):
        raise ParseError('expected an object with a "cameras" list', path)
    entries = []
    names = set()
    for i, e in enumerate(doc["cameras"]):
        if not isinstance(e, dict):
            raise ParseError(f"camera {i} is not an object", path)
        for key in ("name", "width", "height", "fx", "fy", "cx", "cy", "R", "t"):
            if key not in e:
                raise ParseError(f"camera {i} lacks {key!r}", path)
        name = e["name"]
        if not isinstance(name, str):
            raise ParseError(f"camera {i}: name must be a string", path)
        if name in names:
            raise DuplicateName(f"duplicate camera name {name!r}", path)
        names.add(name)
        R, t = e["R"], e["t"]
        if (not isinstance(R, list) or len(R) != 9 or not isinstance(t, list) or len(t) != 3
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in R + t)):
            raise ParseError(f"camera {name!r}: R must hold 9 numbers and t 3 numbers", path)
        Rn = orthonormalize(R)
        if Rn is None:
            raise NonOrthonormalRotation(f"camera {name!r}: rotation is not orthonormal", path)
        if not all(math.isfinite(x) for x in t):
            raise ParseError(f"camera {name!r}: non-finite translation", path)
        cam = Camera(Rn, t, _num(e, "fx", path, i, positive=True), _num(e, "fy", path, i, positive=True),
                     _num(e, "cx", path, i), _num(e, "cy", path, i),
                     _num(e, "width", path, i, integer=True), _num(e, "height", path, i, integer=True))
        entries.append((name, cam))
    return CameraSet(entries)


def load_cameras(path) -> CameraSet:
    return _guard(path, lambda: _parse_cameras(Path(path).read_bytes(), path))


def save_cameras(path, cameras):
    """Write a camera set (or list of (name, Camera)) as JSON."""
    out = []
    for name, c in cameras:
        out.append({"name": name, "width": c.width, "height": c.height, "fx": c.fx, "fy": c.fy,
                    "cx": c.cx, "cy": c.cy, "R": [float(x) for x in c.R.ravel()],
                    "t": [float(x) for x in c.t]})
    Path(path).write_text(json.dumps({"cameras": out}, indent=1))


# --- images -----------------------------------------------------------------

GAMMA = 2.2


def save_png(path, image):
    """8-bit PNG with x**(1/2.2) encoding of a linear [0, 1] image."""
    from PIL import Image

    enc = np.clip(np.asarray(image, dtype=np.float64), 0, 1) ** (1.0 / GAMMA)
    Image.fromarray(np.round(enc * 255).astype(np.uint8)).save(path)


def load_png(path, linear=True) -> np.ndarray:
    """Float RGB image from an 8-bit PNG; ``linear`` undoes the 2.2 encoding."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ParseError(f"unreadable image ({exc.__class__.__name__})", path) from None
    return a**GAMMA if linear else a


def load_image(path, linear=True) -> np.ndarray:
    """RGB float image from PNG or a 3-channel HERAMAP1 raw float file."""
    if str(path).lower().endswith(".png"):
        return load_png(path, linear)
    m = load_map(path)
    if m.shape[2] != 3:
        raise ParseError(f"expected 3 channels, found {m.shape[2]}", path)
    return m


def save_image(path, image):
    if str(path).lower().endswith(".png"):
        save_png(path, image)
    else:
        save_map(path, image)


# --- scene bundles ----------------------------------------------------------

MESH_FILE = "mesh.obj"
TEXTURE_FILE = "texture.heramap"
OPACITY_FILE = "opacity.heramap"
SPLATS_FILE = "splats.ply"
RIG_FILE = "rig.bin"


def load_mesh(obj_path, texture_path, opacity_path) -> TexturedMesh:
    m = load_obj(obj_path)
    tex = load_texture(texture_path)
    opa = load_map(opacity_path)
    if opa.shape[2] != 1:
        raise ParseError("opacity map must have one channel", opacity_path)
    try:
        return TexturedMesh(m.vertices, m.faces, m.uv, tex, opa[..., 0])
    except InvalidParameter as exc:
        raise ParseError(str(exc), obj_path) from None


def load_scene(directory, background=(0.0, 0.0, 0.0)) -> Scene:
    """Scene bundle directory. A missing splats.ply means no splats; rig.bin makes them facet-local."""
    d = Path(directory)
    if not d.is_dir():
        raise AssetError("scene directory not found", d)
    mesh = load_mesh(d / MESH_FILE, d / TEXTURE_FILE, d / OPACITY_FILE)
    splats = load_splats(d / SPLATS_FILE) if (d / SPLATS_FILE).exists() else SplatSet.empty()
    rig = None
    if (d / RIG_FILE).exists():
        ids = load_rig(d / RIG_FILE)
        if len(ids) != len(splats):
            raise ParseError(f"rig has {len(ids)} entries for {len(splats)} splats", d / RIG_FILE)
        rig = RiggedSplats(ids, splats.means, splats.quats, splats.log_scales, splats.opacities, splats.sh)
        try:
            rig.check_bound(len(mesh.faces))
        except InvalidParameter as exc:
            raise ParseError(str(exc), d / RIG_FILE) from None
        from .rigging import facet_frames, pose_splats

        splats = pose_splats(rig, facet_frames(mesh.vertices, mesh.faces, strict=False))
    return Scene(mesh, splats, background, rig=rig)


def save_scene(directory, scene: Scene):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m = scene.mesh
    save_obj(d / MESH_FILE, m.vertices, m.faces, m.uv)
    save_texture(d / TEXTURE_FILE, m.texture)
    save_map(d / OPACITY_FILE, m.opacity)
    if scene.rig is not None:
        r = scene.rig
        save_splats(SplatSet(r.local_pos, r.local_quats, r.local_log_scales, r.opacities, r.sh), d / SPLATS_FILE)
        save_rig(d / RIG_FILE, r.facet_id)
    else:
        save_splats(scene.splats, d / SPLATS_FILE)
        if (d / RIG_FILE).exists():
            (d / RIG_FILE).unlink()


def load_frame_sequence(directory, canonical: TexturedMesh):
    """Vertex arrays of every ``*.obj`` in ``directory`` (lexicographic), checked against the canonical topology."""
    d = Path(directory)
    if not d.is_dir():
        raise AssetError("frame directory not found", d)
    frames = []
    for p in sorted(d.glob("*.obj")):
        m = load_obj(p)
        if (m.faces.shape != canonical.faces.shape or not np.array_equal(m.faces, canonical.faces)
                or m.vertices.shape != canonical.vertices.shape):
            raise TopologyMismatch("frame topology differs from the canonical mesh", p)
        frames.append((p.name, m.vertices))
    return frames


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "psnr_holdout", "num_splats"])
        for r in rows:
            w.writerow([r["iter"], repr(float(r["loss"])), repr(float(r["psnr_holdout"])), r["num_splats"]])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [{"iter": int(r["iter"]), "loss": float(r["loss"]), "psnr_holdout": float(r["psnr_holdout"]),
                 "num_splats": int(r["num_splats"])} for r in csv.DictReader(fh)]


# --- fit checkpoints --------------------------------------------------------

STATE_FILE = "state.npz"


def save_checkpoint(directory, state):
    """Scene bundle plus exact float64 parameters, optimizer moments and RNG state.

    Written to a sibling temp directory and renamed, so an interrupted write
    never replaces the previous good checkpoint.
    """
    import shutil

    d = Path(directory)
    tmp = d.with_name(d.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    save_scene(tmp, state.scene)
    arrays = {"iteration": np.array(state.iteration), "grad_accum": state.stats.grad_accum,
              "count": state.stats.count, "texture": state.scene.mesh.texture,
              "opacity": state.scene.mesh.opacity}
    sp = state.rig if state.rig is not None else state.scene.splats
    if state.rig is not None:
        arrays.update(facet_id=sp.facet_id, pos=sp.local_pos, quats=sp.local_quats, log_scales=sp.local_log_scales)
    else:
        arrays.update(pos=sp.means, quats=sp.quats, log_scales=sp.log_scales)
    arrays.update(opacities=sp.opacities, sh=sp.sh)
    for name in state.adam.m:
        arrays[f"adam_m/{name}"] = state.adam.m[name]
        arrays[f"adam_v/{name}"] = state.adam.v[name]
        arrays[f"adam_t/{name}"] = np.array(state.adam.t[name])
    meta = {"rng": state.rng.bit_generator.state, "metrics": state.metrics}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp / STATE_FILE, **arrays)
    old = d.with_name(d.name + ".old")
    if d.exists():
        if old.exists():
            shutil.rmtree(old)
        d.rename(old)
    tmp.rename(d)
    if old.exists():
        shutil.rmtree(old)


def load_checkpoint(directory, background=(0.0, 0.0, 0.0)):
    """Inverse of :func:`save_checkpoint`; returns a FitState."""
    from .optim.adam import AdamState
    from .optim.densify import DensifyStats
    from .optim.fit import FitState
    from .rigging import facet_frames, pose_splats

    d = Path(directory)
    scene = load_scene(d, background)

    def run():
        with np.load(d / STATE_FILE) as z:
            a = {k: z[k] for k in z.files}
        meta = json.loads(a.pop("meta").tobytes().decode())
        mesh = scene.mesh
        mesh.texture = a["texture"]
        mesh.opacity = a["opacity"]
        rig = None
        if "facet_id" in a:
            rig = RiggedSplats(a["facet_id"], a["pos"], a["quats"], a["log_scales"], a["opacities"], a["sh"])
            scene.rig = rig
            scene.splats = pose_splats(rig, facet_frames(mesh.vertices, mesh.faces, strict=False))
        else:
            scene.rig = None
            scene.splats = SplatSet(a["pos"], a["quats"], a["log_scales"], a["opacities"], a["sh"])
        adam = AdamState()
        for key in a:
            if key.startswith("adam_m/"):
                name = key[7:]
                adam.m[name] = a[key]
                adam.v[name] = a[f"adam_v/{name}"]
                adam.t[name] = int(a[f"adam_t/{name}"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        metrics = [dict(r) for r in meta["metrics"]]
        return FitState(scene, rig, int(a["iteration"]), adam, rng,
                        DensifyStats(a["grad_accum"], a["count"]), metrics)

    return _guard(d / STATE_FILE, run)
