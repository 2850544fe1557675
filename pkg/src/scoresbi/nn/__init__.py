"""Minimal differentiable-network stack: residual MLP, deep sets, optimizers, EMA."""

from .network import (
    MLP,
    NetworkSpec,
    ParameterBundle,
    NumericError,
    InputError,
    build_network,
    forward,
    forward_backward,
)
from .deepset import DeepSetSpec, DeepSet, deepset_forward
from .optim import OptimizerState, EmaState, optimizer_step, ema_update, cosine_lr
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "MLP",
    "NetworkSpec",
    "ParameterBundle",
    "NumericError",
    "InputError",
    "build_network",
    "forward",
    "forward_backward",
    "DeepSetSpec",
    "DeepSet",
    "deepset_forward",
    "OptimizerState",
    "EmaState",
    "optimizer_step",
    "ema_update",
    "cosine_lr",
    "save_checkpoint",
    "load_checkpoint",
]
