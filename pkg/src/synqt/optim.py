"""Decoupled-weight-decay Adam and the cosine learning-rate schedule."""

import math

import numpy as np

from . import kernels

BETA1, BETA2 = 0.9, 0.999
EPS = 1e-8


def adamw_step(param, grad, state, lr, weight_decay,
               betas=(BETA1, BETA2), eps=EPS):
    """One in-place update; ``state`` holds first/second moments and the
    step count.  Weight decay multiplies the pre-update value (decoupled)."""
    if state.get("m") is None:
        state["m"] = np.zeros_like(param.data)
        state["v"] = np.zeros_like(param.data)
        state["t"] = 0
    if grad.shape != param.data.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.data.shape}")
    state["t"] += 1
    kernels.adamw_update(param.data, grad, state["m"], state["v"], state["t"],
                         lr, betas[0], betas[1], eps, weight_decay)
    return state


def cosine_lr(step, total_steps, base_lr, warmup_steps=0):
    """Linear warmup to ``base_lr``, then a half cosine down to zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    def __init__(self, params, lr, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = {name: {} for name in self.params}

    def step(self, grad_map, lr=None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = grad_map.get(p)
            if g is None:
                continue
            adamw_step(p, g.data, self.state[name], lr, self.weight_decay)
