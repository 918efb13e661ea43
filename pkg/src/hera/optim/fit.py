"""Two-stage joint fitting of UV maps and splats against reference images."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidParameter, NumericalFailure
from ..hybrid import RenderOptions, Scene, render_forward
from ..rigging import RiggedSplats, facet_frames, pose_splats, pose_vjp
from ..splats import SplatSet
from .adam import AdamState, adam_step
from .backward import backward_render
from .config import FitConfig
from .densify import DensifyStats, densify_and_prune
from .losses import photometric_loss_grad, psnr

log = logging.getLogger(__name__)

UV_GROUPS = ("texture", "opacity")
SPLAT_GROUPS = ("pos", "quats", "log_scales", "opacities", "sh")


@dataclass
class FitState:
    """Everything needed to continue a fit: parameters, optimizer moments, RNG, stats."""

    scene: Scene
    rig: RiggedSplats | None
    iteration: int
    adam: AdamState
    rng: np.random.Generator
    stats: DensifyStats
    metrics: list = field(default_factory=list)


@dataclass
class FitResult:
    scene: Scene
    metrics: list
    state: FitState


def scene_extent(cameras) -> float:
    """1.1 x the largest distance of a camera center from their mean (at least 1e-6)."""
    centers = np.array([c.center for c in cameras])
    if len(centers) < 2:
        return 1.0
    return max(1.1 * float(np.linalg.norm(centers - centers.mean(0), axis=1).max()), 1e-6)


def _splat_arrays(scene: Scene, rig):
    if rig is not None:
        return {"pos": rig.local_pos, "quats": rig.local_quats, "log_scales": rig.local_log_scales,
                "opacities": rig.opacities, "sh": rig.sh}
    s = scene.splats
    return {"pos": s.means, "quats": s.quats, "log_scales": s.log_scales, "opacities": s.opacities, "sh": s.sh}


def _params(scene: Scene, rig):
    p = {"texture": scene.mesh.texture, "opacity": scene.mesh.opacity}
    p.update(_splat_arrays(scene, rig))
    return p


def _learning_rates(cfg: FitConfig):
    lr = cfg.lr_splat
    return {"texture": cfg.lr_uv_maps, "opacity": cfg.lr_uv_maps, "pos": lr.position, "quats": lr.rotation,
            "log_scales": lr.log_scale, "opacities": lr.opacity, "sh": lr.sh}


def init_state(scene_init: Scene, cfg: FitConfig) -> FitState:
    scene = Scene(scene_init.mesh.copy(), scene_init.splats.copy(), scene_init.background.copy(),
                  rig=None if scene_init.rig is None else scene_init.rig.copy())
    rig = scene.rig
    if rig is not None:
        rig.check_bound(len(scene.mesh.faces))
        scene.splats = pose_splats(rig, facet_frames(scene.mesh.vertices, scene.mesh.faces, strict=False))
    n = len(rig) if rig is not None else len(scene.splats)
    return FitState(scene, rig, 0, AdamState(), np.random.default_rng(cfg.seed), DensifyStats.zeros(n))


def _regularizer(rig: RiggedSplats, cfg: FitConfig):
    """Hinge penalties on local position norm and local scale; value and gradients."""
    n = max(len(rig), 1)
    norm = np.linalg.norm(rig.local_pos, axis=1)
    over = norm > cfg.position_reg_threshold
    value = cfg.position_reg_weight * np.sum((norm - cfg.position_reg_threshold)[over]) / n
    d_pos = np.zeros_like(rig.local_pos)
    d_pos[over] = cfg.position_reg_weight * rig.local_pos[over] / norm[over, None] / n
    s = np.exp(rig.local_log_scales)
    over_s = s > cfg.scale_reg_threshold
    value += cfg.scale_reg_weight * np.sum((s - cfg.scale_reg_threshold)[over_s]) / (3 * n)
    d_ls = np.where(over_s, cfg.scale_reg_weight * s / (3 * n), 0.0)
    return value, d_pos, d_ls


def evaluate_psnr(scene: Scene, views, options: RenderOptions) -> float:
    vals = [psnr(np.clip(render_forward(scene, cam, options).image, 0, 1), target) for cam, target in views]
    return float(np.mean(vals)) if vals else float("nan")


def fit(scene_init: Scene, dataset, cfg: FitConfig, holdout=None, state: FitState = None,
        on_checkpoint=None, on_iteration=None) -> FitResult:
    """Fit ``scene_init`` to ``dataset`` (list of (camera, target image)).

    Stage 1 (``cfg.stage1_iters`` iterations) renders the mesh alone and
    updates only the texture and opacity maps; stage 2 renders both
    primitives, updates everything and densifies. Passing a ``state`` resumes
    a previous run. Raises :class:`NumericalFailure` on a non-finite loss.
    """
    if len(dataset) == 0:
        raise InvalidParameter("dataset must not be empty")
    cfg.validate()
    holdout = list(holdout or [])
    if state is None:
        state = init_state(scene_init, cfg)
    scene = state.scene
    rig = state.rig
    regularize = cfg.regularize if cfg.regularize is not None else rig is not None
    extent = scene_extent([c for c, _ in dataset] + [c for c, _ in holdout])
    lrs = _learning_rates(cfg)
    frames = facet_frames(scene.mesh.vertices, scene.mesh.faces, strict=False) if rig is not None else None
    targets = [np.asarray(t, dtype=np.float64) for _, t in dataset]

    while state.iteration < cfg.total_iters:
        it = state.iteration
        stage1 = it < cfg.stage1_iters
        idx = int(state.rng.integers(len(dataset)))
        cam = dataset[idx][0]
        opts = RenderOptions(lam=cfg.lambda_sort, mask="mesh" if stage1 else "both")
        res = render_forward(scene, cam, opts)
        loss, d_img = photometric_loss_grad(res.image, targets[idx], cfg.lambda_ssim)
        grads = backward_render(scene, cam, d_img, res)
        names = list(UV_GROUPS)
        g = {"texture": grads.texture, "opacity": grads.opacity}
        if not stage1:
            names += list(SPLAT_GROUPS)
            if rig is not None:
                d_pos, d_q, d_ls = pose_vjp(rig, frames, grads.means, grads.quats, grads.log_scales)
                if regularize and len(rig):
                    r, rd_pos, rd_ls = _regularizer(rig, cfg)
                    loss += r
                    d_pos = d_pos + rd_pos
                    d_ls = d_ls + rd_ls
            else:
                d_pos, d_q, d_ls = grads.means, grads.quats, grads.log_scales
            g.update(pos=d_pos, quats=d_q, log_scales=d_ls, opacities=grads.opacities, sh=grads.sh)
        if not math.isfinite(loss) or not grads.all_finite():
            raise NumericalFailure(f"non-finite loss or gradient at iteration {it}")

        params = _params(scene, rig)
        adam_step(params, g, state.adam, lrs, names)
        if not stage1:
            state.stats.add(grads.screen_grad, grads.visible)

        state.iteration = it + 1
        if (not stage1 and cfg.densify.enabled and cfg.densify.start_iter <= state.iteration <= cfg.densify_stop
                and state.iteration % cfg.densify.interval == 0):
            _densify(state, cfg, extent, frames)
            scene, rig = state.scene, state.rig
        if rig is not None and not stage1:
            scene.splats = pose_splats(rig, frames)

        row = {"iter": state.iteration, "loss": float(loss), "psnr_holdout": float("nan"),
               "num_splats": len(rig) if rig is not None else len(scene.splats)}
        last = state.iteration == cfg.total_iters
        if holdout and (last or (cfg.psnr_interval and state.iteration % cfg.psnr_interval == 0)):
            row["psnr_holdout"] = evaluate_psnr(scene, holdout, RenderOptions(lam=cfg.lambda_sort))
            log.info("iter %d loss %.5f holdout psnr %.3f splats %d", state.iteration, loss,
                     row["psnr_holdout"], row["num_splats"])
        state.metrics.append(row)
        if on_iteration is not None:
            on_iteration(state, row)
        if on_checkpoint is not None and cfg.checkpoint_interval and state.iteration % cfg.checkpoint_interval == 0:
            on_checkpoint(state)
    return FitResult(state.scene, state.metrics, state)


def _densify(state: FitState, cfg: FitConfig, extent, frames):
    scene, rig = state.scene, state.rig
    d = cfg.densify
    if rig is not None:
        k = frames.scale[rig.facet_id]
        world_max = np.exp(rig.local_log_scales).max(axis=1) * k
        target = rig
    else:
        world_max = np.exp(scene.splats.log_scales).max(axis=1)
        target = scene.splats
    new, origin, is_new = densify_and_prune(target, state.stats.mean(), world_max, extent, d.grad_threshold,
                                            d.scale_split_threshold, d.opacity_prune_threshold, state.rng)
    for name in SPLAT_GROUPS:
        state.adam.remap_rows(name, origin, is_new)
    if rig is not None:
        state.rig = new
        scene.rig = new
        scene.splats = pose_splats(new, frames)
    else:
        scene.splats = new
    state.stats = DensifyStats.zeros(len(new))
