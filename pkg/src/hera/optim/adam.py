"""Adam with per-group learning rates, operating in place on numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def reset(self, name):
        for d in (self.m, self.v, self.t):
            d.pop(name, None)

    def remap_rows(self, name, origin, is_new):
        """Carry moments along a row remapping; new rows start from zero."""
        if name not in self.m:
            return
        for d in (self.m, self.v):
            old = d[name]
            new = old[origin].copy()
            new[is_new] = 0.0
            d[name] = new


def adam_step(params: dict, grads: dict, state: AdamState, lr: dict, names=None):
    """Update ``params[name]`` in place for every name in ``names`` (default: all grads)."""
    for name in names if names is not None else list(grads):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeMismatch(f"optimizer state for {name!r} has shape {m.shape}, parameter {p.shape}")
        state.t[name] += 1
        t = state.t[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        p -= lr[name] * m_hat / (np.sqrt(v_hat) + EPS)
