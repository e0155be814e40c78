"""AdamW, polynomial learning-rate decay and early stopping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

CONTINUE = "continue"
STOP = "stop"


class NonFiniteGradientError(FloatingPointError):
    pass


def poly_lr(step: int, total_steps: int, cfg) -> float:
    """lr_final + (lr_init - lr_final) * (1 - step / total_steps) ** poly_power."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    frac = 1.0 - step / total_steps
    return cfg.lr_final + (cfg.lr_init - cfg.lr_final) * frac**cfg.poly_power


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str, param: np.ndarray) -> bool:
    """Weight decay applies to projection/conv kernels, not to biases or norm parameters."""
    return param.ndim >= 2


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.01,
) -> Dict[str, np.ndarray]:
    """One in-place AdamW update with decoupled weight decay; returns ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteGradientError(f"non-finite gradient in {name!r} ({bad} of {g.size} entries)")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in params:
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay and decays(name, p):
            p -= lr * weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class EarlyStopState:
    """Tracks a monitored metric; ``mode`` is "min" (losses) or "max" (scores).

    NaN never counts as an improvement.
    """

    patience: int
    mode: str = "min"
    best_metric: float = math.nan
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    epoch: int = 0

    def improved(self, value: float) -> bool:
        if math.isnan(value):
            return False
        if math.isnan(self.best_metric):
            return True
        return value < self.best_metric if self.mode == "min" else value > self.best_metric


def early_stop_update(state: EarlyStopState, value: float) -> str:
    state.epoch += 1
    if state.improved(value):
        state.best_metric = value
        state.best_epoch = state.epoch
        state.epochs_since_improvement = 0
        return CONTINUE
    state.epochs_since_improvement += 1
    return STOP if state.epochs_since_improvement >= state.patience else CONTINUE
