"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Parameter


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(params, state: OptimizerState, cfg: AdamWConfig):
    """One AdamW update over ``params``.

    Frozen parameters are skipped. A trainable parameter without a fresh
    gradient raises ``RuntimeError``; gradients are cleared after the update.
    """
    live = [p for p in params if p.trainable]
    for p in live:
        if p.grad is None:
            raise RuntimeError(f"adamw_step on {p!r} without a fresh gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for p in live:
        key = id(p)
        g = p.grad
        m = state.exp_avg.get(key)
        if m is None:
            m = state.exp_avg[key] = np.zeros_like(p.value)
            state.exp_avg_sq[key] = np.zeros_like(p.value)
        v = state.exp_avg_sq[key]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        value = p.value * (1.0 - cfg.lr * cfg.weight_decay)
        value -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.value = value.astype(p.value.dtype, copy=False)
        p.grad = None


class AdamW:
    """Optimizer bound to a fixed parameter list."""

    def __init__(self, params: list[Parameter], cfg: AdamWConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = OptimizerState()

    def step(self):
        adamw_step(self.params, self.state, self.cfg)
