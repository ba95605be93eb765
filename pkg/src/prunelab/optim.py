"""AdamW and the warmup + half-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelState


@dataclass(frozen=True)
class TrainSchedule:
    total_epochs: int = 40
    warmup_epochs: int = 3
    peak_lr: float = 3e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_frames_cap: int = 2400
    # "cosine": linear warmup then half-cosine to 0; "constant": peak_lr throughout
    shape: str = "cosine"

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_frames_cap < 1:
            raise ValueError("batch_frames_cap must be positive")
        if self.shape not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")


def lr_at(schedule: TrainSchedule, epoch: float) -> float:
    """Learning rate at a (fractional) epoch in ``[0, total_epochs]``."""
    T, W, peak = schedule.total_epochs, schedule.warmup_epochs, schedule.peak_lr
    if not 0 <= epoch <= T:
        raise ValueError(f"epoch {epoch} outside [0, {T}]")
    if schedule.shape == "constant":
        return peak
    if epoch < W:
        return peak * epoch / W
    return peak * 0.5 * (1.0 + math.cos(math.pi * (epoch - W) / (T - W)))


class AdamW:
    """Adam with decoupled weight decay; first/second moments kept per parameter name.

    Update for each parameter ``p`` with gradient ``g`` at step ``k`` (1-based)::

        p <- p * (1 - lr * wd)
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)
    """

    def __init__(self, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_index = 0

    @classmethod
    def from_schedule(cls, schedule: TrainSchedule) -> "AdamW":
        return cls(schedule.beta1, schedule.beta2, schedule.eps, schedule.weight_decay)

    def step(self, state: ModelState, grads: dict[str, np.ndarray], lr: float) -> ModelState:
        """Apply one update in place and return ``state``."""
        if set(grads) != set(state.params):
            missing = set(state.params) ^ set(grads)
            raise KeyError(f"gradient keys do not match parameters: {sorted(missing)}")
        self.step_index += 1
        k = self.step_index
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**k
        c2 = 1.0 - b2**k
        for name, p in state.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.values *= 1.0 - lr * self.weight_decay
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return state
