"""Adam and global-norm gradient clipping over named numpy buffers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> Mapping[str, np.ndarray]:
    """Apply one bias-corrected Adam update in place and return ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr == 0:
            continue
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)
    return params


def global_norm(grads) -> float:
    return float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads])))


def clip_global_norm(grads: list, max_norm: float) -> tuple[list, float]:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the gradients and the norm measured before clipping. After the
    float multiply the norm is re-measured and, if rounding left it above the
    bound, nudged down again; this keeps the bound exact in single precision
    and makes the operation idempotent.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    cur = norm
    first = True
    while cur > max_norm:
        scale = max_norm / cur
        if not first:
            # the exact ratio can round to 1 in float32; shrink by a few ulps
            scale *= 1.0 - 1e-6
        first = False
        for g in grads:
            g *= np.asarray(scale, dtype=g.dtype)
        cur = global_norm(grads)
    return grads, norm
