"""Adam/AdamW with cosine learning-rate decay, and EMA of network weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import ConfigurationError, NumericError, ParameterBundle

__all__ = ["OptimizerState", "EmaState", "optimizer_step", "ema_update", "cosine_lr"]


def cosine_lr(base_lr, step_index, total_steps):
    """base_lr * 0.5 * (1 + cos(pi * i / total_steps)), clamped past the end."""
    frac = min(step_index, total_steps) / max(total_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    kind: str = "adam"
    base_lr: float = 5e-4
    total_steps: int = 10_000
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "cosine_decay"
    step_index: int = 0
    first_moment: ParameterBundle | None = None
    second_moment: ParameterBundle | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if self.lr_schedule not in ("cosine_decay", "constant"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")

    def current_lr(self):
        if self.lr_schedule == "constant":
            return self.base_lr
        return cosine_lr(self.base_lr, self.step_index, self.total_steps)


def optimizer_step(opt: OptimizerState, params: ParameterBundle,
                   grads: ParameterBundle):
    """One in-place Adam/AdamW update; returns (params, opt).

    AdamW applies decoupled weight decay params *= (1 - lr * weight_decay)
    before the moment update.
    """
    if opt.first_moment is None:
        opt.first_moment = params.zeros_like()
        opt.second_moment = params.zeros_like()
    if not grads.all_finite():
        raise NumericError("non-finite gradients in optimizer_step")
    lr = opt.current_lr()
    opt.step_index += 1
    i = opt.step_index
    bc1 = 1.0 - opt.beta1 ** i
    bc2 = 1.0 - opt.beta2 ** i
    for name, p in params.items():
        g = grads[name]
        m = opt.first_moment[name]
        v = opt.second_moment[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if opt.kind == "adamw" and opt.weight_decay:
            p *= 1.0 - lr * opt.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return params, opt


@dataclass
class EmaState:
    """Power-function EMA: beta_i = (1 - 1/i)^(gamma + 1)."""

    averaged_params: ParameterBundle | None = None
    gamma: float = 6.94
    update_count: int = 0

    def beta(self, i):
        return (1.0 - 1.0 / i) ** (self.gamma + 1.0)


def ema_update(ema: EmaState, params: ParameterBundle) -> EmaState:
    ema.update_count += 1
    beta = ema.beta(ema.update_count)
    if ema.averaged_params is None:
        ema.averaged_params = params.zeros_like()
    for name, avg in ema.averaged_params.items():
        avg *= beta
        avg += (1.0 - beta) * params[name]
    return ema
