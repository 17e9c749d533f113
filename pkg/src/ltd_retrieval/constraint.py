"""Lagrange-multiplier constraint, SGD descent, cosine schedule and SWA.

The multiplier ``lam`` enforces ``l_rec <= eta`` via

    L_lag = l_con + lam * (l_rec / eta - 1)

Model parameters descend on ``L_lag`` with ``lam`` held fixed; ``lam`` then
ascends using momentum with dampening::

    g        = l_rec / eta - 1
    velocity = momentum * velocity + (1 - dampening) * g
    lam      = clip(lam + lr * velocity, lam_min, lam_max)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyAccumulator
from .losses import Objective


@dataclass(frozen=True)
class LagrangeState:
    lam: float = 1.0
    velocity: float = 0.0
    eta: float = 0.2
    lr: float = 5e-3
    momentum: float = 0.9
    dampening: float = 0.9
    lam_min: float = 0.0
    lam_max: float = 100.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not self.lam_min <= self.lam <= self.lam_max:
            raise ValueError(f"lambda {self.lam} outside [{self.lam_min}, {self.lam_max}]")


def lagrangian_objective(l_con, l_rec, state):
    """Value of the Lagrangian and the descent weights ``(1, lam / eta)``."""
    return Objective(l_con + state.lam * (l_rec / state.eta - 1.0), 1.0, state.lam / state.eta)


def update_lambda(state, l_rec):
    """One ascent step on the multiplier; returns a new state."""
    g = l_rec / state.eta - 1.0
    velocity = state.momentum * state.velocity + (1.0 - state.dampening) * g
    lam = min(state.lam_max, max(state.lam_min, state.lam + state.lr * velocity))
    return replace(state, lam=lam, velocity=velocity)


def sgd_step(store, lr):
    """``p -= lr * grad`` for every parameter, then zero the gradients."""
    for _, p in store:
        p.value -= lr * p.grad
        p.grad[...] = 0.0
    return store


def cosine_lr(step, total, base_lr):
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return base_lr
    return base_lr * (1.0 + math.cos(math.pi * step / total)) / 2.0


def swa_schedule(steps_per_epoch, n_checkpoints=5, fraction=0.1):
    """Iteration indices (within an epoch) whose weights are averaged.

    ``n_checkpoints`` evenly spaced indices inside the last ``fraction`` of
    the epoch, ending on the final iteration.  Short epochs whose window
    holds fewer iterations contribute every iteration in the window.
    """
    window = max(1, int(math.ceil(fraction * steps_per_epoch)))
    start = steps_per_epoch - window
    if window <= n_checkpoints:
        return list(range(start, steps_per_epoch))
    picks = np.linspace(start, steps_per_epoch - 1, n_checkpoints)
    return sorted({int(round(p)) for p in picks})


class SwaAccumulator:
    """Running elementwise sum of parameter snapshots."""

    def __init__(self):
        self.total = None
        self.count = 0

    def update(self, params):
        if self.total is None:
            self.total = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        else:
            for k, v in params.items():
                self.total[k] += v
        self.count += 1

    def finalize(self):
        if self.count < 1:
            raise EmptyAccumulator("no checkpoints were absorbed")
        return {k: v / self.count for k, v in self.total.items()}

    def reset(self):
        self.total = None
        self.count = 0
