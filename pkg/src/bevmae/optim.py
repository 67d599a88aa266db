"""Adam with bias correction and a cosine one-cycle learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OneCycle:
    max_lr: float = 3e-4
    total_steps: int = 400
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    @property
    def peak_step(self) -> int:
        return int(round(self.pct_start * self.total_steps))

    def __call__(self, step: int) -> float:
        return one_cycle_lr(step, self.total_steps, self.max_lr, self.pct_start,
                            self.div_factor, self.final_div_factor)

    def to_dict(self) -> dict:
        return {"max_lr": self.max_lr, "total_steps": self.total_steps, "pct_start": self.pct_start,
                "div_factor": self.div_factor, "final_div_factor": self.final_div_factor}


def _cos_interp(start: float, end: float, t: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * t)) / 2.0


def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Cosine warmup from ``max_lr / div_factor`` to ``max_lr`` at
    ``round(pct_start * total_steps)``, then cosine anneal to
    ``max_lr / final_div_factor`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    start = max_lr / div_factor
    end = max_lr / final_div_factor
    peak = int(round(pct_start * total_steps))
    if step <= peak:
        return max_lr if peak == 0 else _cos_interp(start, max_lr, step / peak)
    return _cos_interp(max_lr, end, (step - peak) / (total_steps - peak))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """In-place bias-corrected Adam update of every array in ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteGradient(f"gradient of {name!r} has {bad} non-finite entries at step {state.step}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
