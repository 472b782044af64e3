"""
Optimizer Component

AdamW with bias correction and decoupled weight decay, plus the linear-warmup
cosine learning-rate schedule used for MAE pretraining.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from components.errors import DimensionError, ParameterError, TrainingError
from components.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """Moment buffers and step counter, keyed by parameter name."""
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self):
        if self.lr <= 0:
            raise ParameterError(f"AdamW lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f"AdamW betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ParameterError("AdamW eps must be > 0 and weight_decay >= 0")


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamWState,
               lr: Optional[float] = None, decay: Optional[Iterable[str]] = None):
    """
    Apply one AdamW update in place.

    Args:
        params: Named parameters
        grads: Gradient per parameter name; missing names count as zero gradient
        state: Optimizer state, mutated
        lr: Learning rate for this step (defaults to state.lr)
        decay: Names that receive weight decay (defaults to all)

    Raises:
        TrainingError: If a gradient contains NaN or inf
    """
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ParameterError(f"AdamW lr must be > 0, got {lr}")
    decay = set(params) if decay is None else set(decay)

    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter '{name}' at step {state.t + 1}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t

    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v

        value = p.data.astype(np.float64)
        if name in decay and state.weight_decay:
            value = value * (1.0 - lr * state.weight_decay)
        value = value - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = value.astype(p.dtype)


class AdamW:
    """Stateful AdamW bound to a parameter registry."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1.5e-4, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.05, decay_min_rank: int = 2):
        """
        Initialize the optimizer.

        Args:
            params: Named parameters (e.g. Module.named_parameters())
            lr: Base learning rate
            betas: (beta1, beta2)
            eps: Denominator epsilon
            weight_decay: Decoupled weight decay coefficient
            decay_min_rank: Parameters with fewer dimensions skip weight decay
        """
        self.params = params
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        self.state.validate()
        self.decay = [name for name, p in params.items() if p.ndim >= decay_min_rank]

    def step(self, lr: Optional[float] = None):
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, lr=lr, decay=self.decay)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def cosine_lr(step: int, base_lr: float, total_steps: int, warmup_steps: int = 0, min_lr: float = 0.0) -> float:
    """
    Linear warmup followed by half-cosine decay to min_lr.

    Args:
        step: Zero-based step index
        base_lr: Peak learning rate
        total_steps: Steps in the whole schedule
        warmup_steps: Steps of linear ramp
        min_lr: Floor reached at total_steps

    Returns:
        Learning rate for this step
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
