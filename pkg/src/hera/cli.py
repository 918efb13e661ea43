"""Command-line entry point: render, animate, fit, metrics and info.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import AssetError, HeraError, NumericalFailure
from .hybrid import RenderOptions, Scene, render, set_threads
from .optim.config import FitConfig
from .optim.losses import psnr, ssim

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("hera")


class InputError(HeraError):
    pass


def _rgb(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected R,G,B floats, got {text!r}") from None
    if len(vals) != 3 or not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected three finite values, got {text!r}")
    return np.array(vals)


def _positive_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _render_flags(p):
    p.add_argument("--mask", choices=("both", "mesh", "splats"), default="both",
                   help="which primitives to render (default: both)")
    p.add_argument("--sort", choices=("stable", "legacy"), default="stable",
                   help="splat/mesh ordering: stable classification or per-pixel depth (default: stable)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.05, metavar="METERS",
                   help="depth margin that pushes a splat behind the mesh (default: 0.05)")
    p.add_argument("--background", type=_rgb, default=np.zeros(3), metavar="R,G,B",
                   help="background color in linear [0,1] (default: 0,0,0)")
    p.add_argument("--format", choices=("png", "heramap"), default="png",
                   help="output image format (default: png)")


def build_parser():
    parser = argparse.ArgumentParser(prog="hera", description="Hybrid mesh and Gaussian splat renderer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None, metavar="N",
                        help="worker threads (default: $HERA_THREADS, else all cores)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("render", parents=[common], help="render a scene bundle from every camera")
    p.add_argument("--scene", required=True, type=Path, metavar="DIR", help="scene bundle directory")
    p.add_argument("--cameras", required=True, type=Path, metavar="FILE", help="camera set JSON")
    p.add_argument("--out", required=True, type=Path, metavar="DIR", help="output directory")
    _render_flags(p)

    p = sub.add_parser("animate", parents=[common], help="render a mesh animation with rigged splats")
    p.add_argument("--canonical", required=True, type=Path, metavar="DIR", help="canonical scene bundle")
    p.add_argument("--frames", required=True, type=Path, metavar="DIR", help="directory of per-frame OBJs")
    p.add_argument("--cameras", required=True, type=Path, metavar="FILE", help="camera set JSON")
    p.add_argument("--out", required=True, type=Path, metavar="DIR", help="output directory")
    _render_flags(p)

    p = sub.add_parser("fit", parents=[common], help="fit UV maps and splats to multi-view images")
    p.add_argument("--config", required=True, type=Path, metavar="FILE", help="TOML fit configuration")
    p.add_argument("--dataset", required=True, type=Path, metavar="DIR",
                   help="directory with cameras.json and one <camera name>.png (or .heramap) per camera")
    p.add_argument("--out", required=True, type=Path, metavar="DIR", help="output directory")
    p.add_argument("--init", type=Path, default=None, metavar="DIR",
                   help="initial scene bundle (default: DATASET/init)")
    p.add_argument("--holdout", default="", metavar="NAMES",
                   help="comma-separated camera names kept out of training and used for PSNR")
    p.add_argument("--background", type=_rgb, default=np.zeros(3), metavar="R,G,B",
                   help="background color in linear [0,1] (default: 0,0,0)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")

    p = sub.add_parser("metrics", parents=[common], help="PSNR and SSIM between two image directories")
    p.add_argument("--a", required=True, type=Path, metavar="DIR", help="first image directory")
    p.add_argument("--b", required=True, type=Path, metavar="DIR", help="second image directory")

    p = sub.add_parser("info", parents=[common], help="summarize a scene bundle")
    p.add_argument("--scene", required=True, type=Path, metavar="DIR", help="scene bundle directory")
    return parser


def _options(args):
    return RenderOptions(lam=args.lam, sort_mode=args.sort, mask=args.mask)


def _write(path_stem, image, fmt):
    io.save_image(f"{path_stem}.{fmt}", image)


def cmd_render(args):
    scene = io.load_scene(args.scene, args.background)
    cams = io.load_cameras(args.cameras)
    opts = _options(args)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, cam in cams:
        _write(args.out / name, render(scene, cam, opts), args.format)
        log.info("rendered %s", name)
    return EXIT_OK


_FRAME_NUM = re.compile(r"^(.*?)(\d+)$")


def _check_sequence(paths):
    """Report the first gap in a numbered frame sequence."""
    parsed = [_FRAME_NUM.match(p.stem) for p in paths]
    if not parsed or not all(parsed):
        return
    prefixes = {m.group(1) for m in parsed}
    if len(prefixes) != 1:
        return
    nums = sorted(int(m.group(2)) for m in parsed)
    width = len(parsed[0].group(2))
    present = set(nums)
    for k in range(nums[0], nums[-1] + 1):
        if k not in present:
            name = f"{prefixes.pop()}{k:0{width}d}.obj"
            raise AssetError("frame missing from sequence", paths[0].parent / name)


def cmd_animate(args):
    from .rigging import pose_scene

    scene = io.load_scene(args.canonical, args.background)
    cams = io.load_cameras(args.cameras)
    if not args.frames.is_dir():
        raise AssetError("frame directory not found", args.frames)
    _check_sequence(sorted(args.frames.glob("*.obj")))
    frames = io.load_frame_sequence(args.frames, scene.mesh)
    if not frames:
        raise AssetError("no OBJ frames found", args.frames)
    opts = _options(args)
    for fname, verts in frames:
        if scene.rig is not None:
            posed = pose_scene(scene.mesh, verts, scene.rig, scene.background)
        else:
            posed = Scene(scene.mesh.with_vertices(verts), scene.splats, scene.background)
        out = args.out / Path(fname).stem
        out.mkdir(parents=True, exist_ok=True)
        for name, cam in cams:
            _write(out / name, render(posed, cam, opts), args.format)
        log.info("frame %s done", fname)
    return EXIT_OK


def _load_dataset(directory):
    cams = io.load_cameras(directory / "cameras.json")
    views = []
    for name, cam in cams:
        for ext in (".png", ".heramap"):
            path = directory / f"{name}{ext}"
            if path.exists():
                break
        else:
            raise AssetError(f"no target image for camera {name!r}", directory / f"{name}.png")
        img = io.load_image(path)
        if img.shape != (cam.height, cam.width, 3):
            raise AssetError(f"image is {img.shape[1]}x{img.shape[0]}, camera expects {cam.width}x{cam.height}",
                             path)
        views.append((name, cam, img))
    return views


def cmd_fit(args):
    from .optim.fit import fit

    cfg = FitConfig.load(args.config)
    views = _load_dataset(args.dataset)
    hold_names = [n for n in args.holdout.split(",") if n]
    unknown = set(hold_names) - {n for n, _, _ in views}
    if unknown:
        raise InputError(f"unknown holdout cameras: {sorted(unknown)}")
    train = [(c, t) for n, c, t in views if n not in hold_names]
    holdout = [(c, t) for n, c, t in views if n in hold_names]
    if not train:
        raise InputError("no training views left after holdout")
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "checkpoint"
    state = None
    if args.resume:
        if not (ckpt / io.STATE_FILE).exists():
            raise AssetError("no checkpoint to resume from", ckpt)
        state = io.load_checkpoint(ckpt, args.background)
        init = state.scene
    else:
        init = io.load_scene(args.init or args.dataset / "init", args.background)

    def checkpoint(st):
        io.save_checkpoint(ckpt, st)

    if state is None:
        from .optim.fit import init_state

        state = init_state(init, cfg)
        checkpoint(state)
    try:
        result = fit(init, train, cfg, holdout=holdout, state=state, on_checkpoint=checkpoint)
    except NumericalFailure:
        # the checkpoint directory still holds the last good state
        io.write_metrics_csv(args.out / "metrics.csv", state.metrics)
        raise
    checkpoint(result.state)
    io.save_scene(args.out / "scene", result.scene)
    io.write_metrics_csv(args.out / "metrics.csv", result.metrics)
    final = [r for r in result.metrics if not math.isnan(r["psnr_holdout"])]
    if final:
        log.info("final holdout PSNR %.3f dB", final[-1]["psnr_holdout"])
    return EXIT_OK


def _image_files(directory):
    if not directory.is_dir():
        raise AssetError("image directory not found", directory)
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in (".png", ".heramap")}


def _fmt(v):
    return "inf" if math.isinf(v) else f"{v:.6f}"


def cmd_metrics(args):
    a, b = _image_files(args.a), _image_files(args.b)
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        missing = (args.b / only_a[0]) if only_a else (args.a / only_b[0])
        raise AssetError("file has no counterpart in the other directory", missing)
    print("image,psnr,ssim")
    ps, ss = [], []
    for name in sorted(a):
        x = io.load_image(a[name], linear=False)
        y = io.load_image(b[name], linear=False)
        if x.shape != y.shape:
            raise AssetError(f"shape {x.shape} differs from {y.shape}", b[name])
        p, s = psnr(x, y), ssim(x, y)
        ps.append(p)
        ss.append(s)
        print(f"{name},{_fmt(p)},{s:.6f}")
    if ps:
        print(f"mean,{_fmt(float(np.mean(ps)))},{float(np.mean(ss)):.6f}")
    return EXIT_OK


def cmd_info(args):
    scene = io.load_scene(args.scene)
    m, s = scene.mesh, scene.splats
    th, tw = m.texture.shape[:2]
    print(f"vertices: {len(m.vertices)}")
    print(f"triangles: {len(m.faces)}")
    print(f"texture: {tw}x{th}, SH degree {m.sh_degree}")
    print(f"splats: {len(s)}, SH degree {s.sh_degree}")
    print(f"rigged: {'yes' if scene.rig is not None else 'no'}")
    if len(s):
        lo, hi = s.means.min(0), s.means.max(0)
        print("splat bounds: " + " ".join(f"[{a:.4g}, {b:.4g}]" for a, b in zip(lo, hi)))
    return EXIT_OK


COMMANDS = {"render": cmd_render, "animate": cmd_animate, "fit": cmd_fit, "metrics": cmd_metrics,
            "info": cmd_info}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        return COMMANDS[args.command](args)
    except NumericalFailure as exc:
        print(f"hera: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HeraError as exc:
        print(f"hera: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # e.g. a malformed HERA_THREADS value
        print(f"hera: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
