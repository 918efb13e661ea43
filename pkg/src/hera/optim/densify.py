"""Clone / split / prune of splats driven by accumulated screen-space gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..geometry import quat_to_rotmat
from ..rigging import RiggedSplats
from ..splats import SplatSet

SPLIT_FACTOR = 1.6
SPLIT_CHILDREN = 2


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def add(self, screen_grad, visible):
        self.grad_accum[visible] += screen_grad[visible]
        self.count[visible] += 1

    def mean(self):
        return np.where(self.count > 0, self.grad_accum / np.maximum(self.count, 1), 0.0)


def _fields(splats):
    if isinstance(splats, RiggedSplats):
        return splats.local_pos, splats.local_quats, splats.local_log_scales
    return splats.means, splats.quats, splats.log_scales


def _build(template, idx, pos, quats, log_scales):
    if isinstance(template, RiggedSplats):
        return RiggedSplats(template.facet_id[idx], pos, quats, log_scales,
                            template.opacities[idx], template.sh[idx])
    return SplatSet(pos, quats, log_scales, template.opacities[idx], template.sh[idx])


def densify_and_prune(splats, mean_grad, world_max_scale, extent, grad_threshold=2e-4,
                      scale_split_threshold=0.01, opacity_prune_threshold=5e-3, rng=None):
    """Returns (new_splats, origin, is_new).

    ``origin[i]`` is the index of the splat row ``i`` descends from and
    ``is_new[i]`` marks clones and split children. Rigged children keep the
    parent's facet. ``world_max_scale`` is the largest activated world-space
    scale per splat; ``extent`` the scene extent the split threshold refers to.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(splats)
    pos, quats, log_scales = _fields(splats)
    selected = np.asarray(mean_grad) > grad_threshold
    big = np.asarray(world_max_scale) > scale_split_threshold * extent
    clone = np.flatnonzero(selected & ~big)
    split = np.flatnonzero(selected & big)
    keep = np.flatnonzero(~np.isin(np.arange(n), split))

    idx = [keep, clone]
    new_pos = [pos[keep], pos[clone]]
    new_q = [quats[keep], quats[clone]]
    new_ls = [log_scales[keep], log_scales[clone]]
    flags = [np.zeros(len(keep), bool), np.ones(len(clone), bool)]
    if len(split):
        parent = np.repeat(split, SPLIT_CHILDREN)
        std = np.exp(log_scales[parent])
        z = rng.standard_normal((len(parent), 3)) * std
        offsets = np.einsum("nij,nj->ni", quat_to_rotmat(quats[parent]), z)
        idx.append(parent)
        new_pos.append(pos[parent] + offsets)
        new_q.append(quats[parent])
        new_ls.append(log_scales[parent] - np.log(SPLIT_FACTOR))
        flags.append(np.ones(len(parent), bool))
    origin = np.concatenate(idx)
    out = _build(splats, origin, np.concatenate(new_pos), np.concatenate(new_q), np.concatenate(new_ls))
    is_new = np.concatenate(flags)

    alive = expit(out.opacities) >= opacity_prune_threshold
    if not alive.all():
        out = out.subset(alive)
        origin = origin[alive]
        is_new = is_new[alive]
    return out, origin, is_new
