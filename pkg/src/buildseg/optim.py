"""Adaptive-moment optimizer with decoupled weight decay, plus the schedule.

The decay term is gated by the same step size as the gradient term, so a
zero learning rate freezes parameters exactly. The schedule is a pure
function of the step index, which keeps resumed runs bit-identical without
any serialized schedule state.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 5e-4,
                 weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.moment1 = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params}
        self.moment2 = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """One update; ``lr`` overrides the base rate (scheduler hook)."""
        rate = self.lr if lr is None else lr
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.moment1[name]
            v = self.moment2[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / correction1
            v_hat = v / correction2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - rate * update).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.moment1:
            out[f"opt.m1.{name}"] = self.moment1[name]
            out[f"opt.m2.{name}"] = self.moment2[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.moment1:
            key1, key2 = f"opt.m1.{name}", f"opt.m2.{name}"
            if key1 not in arrays or key2 not in arrays:
                raise KeyError(f"checkpoint is missing optimizer state for '{name}'")
            self.moment1[name] = arrays[key1].astype(np.float64, copy=True)
            self.moment2[name] = arrays[key2].astype(np.float64, copy=True)
        self.step_count = step_count


def cosine_restart_lr(step: int, base_lr: float, first_cycle: int, cycle_mult: int = 2,
                      min_lr: float = 0.0) -> float:
    """Cosine-annealed rate with warm restarts at doubling cycle lengths.

    Cycle k spans ``first_cycle * cycle_mult**k`` steps; within a cycle the
    rate falls from ``base_lr`` to ``min_lr`` along a half cosine, then
    snaps back at the restart.
    """
    if first_cycle < 1:
        raise ValueError(f"first_cycle must be >= 1, got {first_cycle}")
    remaining = step
    length = first_cycle
    while remaining >= length:
        remaining -= length
        length *= cycle_mult
    progress = remaining / length
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
