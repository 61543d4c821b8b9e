"""Adam with bias correction and the inverse-square-root LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to `peak` at `step == warmup`, then 1/sqrt decay.

    Both branches equal `peak` exactly at the warmup boundary.
    """
    if step < 1:
        raise ValueError("schedule steps start at 1")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Standard Adam over named parameters; moments keyed by name.

    The learning rate is passed to `step`, so any schedule can drive it.
    Parameters with no gradient (frozen or unused this step) are skipped
    and their moments stay untouched.
    """

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        seen = set()
        self.params: list = []
        for name, p in named_params:
            if id(p) in seen:
                continue
            seen.add(id(p))
            self.params.append((name, p))
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.step_count = 0

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        out = {"step": np.array(float(self.step_count))}
        for name, _ in self.params:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step"])
        for name, p in self.params:
            m = np.asarray(state[f"m.{name}"])
            v = np.asarray(state[f"v.{name}"])
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"optimizer moment shape mismatch for {name!r}")
            self.m[name] = m.astype(np.float64).copy()
            self.v[name] = v.astype(np.float64).copy()
