"""SGD with momentum and the two learning-rate schedules the recipes use."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .autodiff import Parameter
from .errors import ContractError


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def sgd_step(
    params,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """buf <- momentum*buf + (grad + wd*value); value <- value - lr*buf.

    Parameters with no accumulated gradient are treated as grad = 0 (the
    momentum buffer still decays them).
    """
    for p in params:
        g = p.grad if p.grad is not None else 0.0
        if weight_decay:
            g = g + weight_decay * p.data
        p.momentum *= momentum
        p.momentum += g
        p.data -= lr * p.momentum


@dataclass(frozen=True)
class LrSchedule:
    """Learning rate as a function of a step index in [0, total_steps].

    cosine:    0.5*base*(1 + cos(pi*step/total)), reaching 0 at the endpoint.
    one_cycle: linear from base/100 up to base over the first 30% of steps,
               then linear back down to base/100.  The named policy leaves
               its knobs open; this shape is the documented stand-in.
    constant:  base everywhere.
    """

    kind: str  # cosine | one_cycle | constant
    base_lr: float
    total_steps: int
    warmup_frac: float = 0.3
    final_div: float = 100.0

    def __post_init__(self):
        if self.kind not in ("cosine", "one_cycle", "constant"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0 or self.total_steps < 1:
            raise ContractError("schedule needs base_lr > 0 and total_steps >= 1")


def lr_at(schedule: LrSchedule, step: float) -> float:
    if step < 0 or step > schedule.total_steps:
        raise ContractError(
            f"step {step} outside [0, {schedule.total_steps}]"
        )
    frac = step / schedule.total_steps
    if schedule.kind == "constant":
        return schedule.base_lr
    if schedule.kind == "cosine":
        return max(0.0, 0.5 * schedule.base_lr * (1.0 + math.cos(math.pi * frac)))
    floor = schedule.base_lr / schedule.final_div
    if frac <= schedule.warmup_frac:
        t = frac / schedule.warmup_frac
        return floor + (schedule.base_lr - floor) * t
    t = (frac - schedule.warmup_frac) / (1.0 - schedule.warmup_frac)
    return schedule.base_lr + (floor - schedule.base_lr) * t


__all__ = ["Parameter", "LrSchedule", "lr_at", "sgd_step", "zero_grads"]
