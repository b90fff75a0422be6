"""Depth-routed modular policies for multi-task reinforcement learning."""

from .autodiff import Tape, Var, gradient_check
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .network import ModulePolicy, PolicyConfig
from .routing import (
    effective_modules,
    mask_softmax,
    route_balance_temperatures,
    sample_k_mask,
    topk_mask,
)

from .sac import Trainer, TrainSettings

__all__ = [
    "ConfigError",
    "RunConfig",
    "Trainer",
    "TrainSettings",
    "load_checkpoint",
    "save_checkpoint",
    "Tape",
    "Var",
    "gradient_check",
    "ModulePolicy",
    "PolicyConfig",
    "effective_modules",
    "mask_softmax",
    "route_balance_temperatures",
    "sample_k_mask",
    "topk_mask",
]
