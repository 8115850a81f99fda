"""Adam optimizer (bias-corrected) and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place.

    `grads` maps parameter names to gradient arrays of identical shape;
    parameters absent from `grads` are left untouched (frozen).
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise ArithmeticError(f"non-finite gradient for '{name}'")
        m = state.first_moment.setdefault(name, np.zeros(p.data.shape, dtype=np.float64))
        v = state.second_moment.setdefault(name, np.zeros(p.data.shape, dtype=np.float64))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


def grads_of(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Collect accumulated gradients from parameters that have one."""
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    warmup_steps: int = 1
    kind: str = "inverse_sqrt"

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be > 0")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.kind not in ("constant", "inverse_sqrt"):
            raise ValueError(f"unknown schedule kind '{self.kind}'")


def schedule_lr(s: LrSchedule, step: int) -> float:
    """Learning rate at `step` (1-based): linear warmup to peak, then 1/sqrt decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if s.kind == "constant":
        return s.peak_lr
    w = s.warmup_steps
    return s.peak_lr * min(step / w, (w / step) ** 0.5)
