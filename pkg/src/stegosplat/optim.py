"""Adam with per-group learning rates and exponential decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LRSchedule:
    init: float
    final: float
    steps: int

    def __call__(self, it: int) -> float:
        if self.steps <= 0 or self.init == 0.0:
            return self.init
        t = min(max(it / self.steps, 0.0), 1.0)
        return float(np.exp((1 - t) * np.log(self.init) + t * np.log(self.final)))


class Adam:
    """Updates numpy arrays in place.  Row-indexed groups can be remapped when
    anchors are pruned or grown."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray | None, lr: float) -> None:
        if grad is None or lr == 0.0:
            return
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m, v = self.m[name], self.v[name]
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        v += (1 - self.b2) * grad * grad
        mhat = m / (1 - self.b1 ** t)
        vhat = v / (1 - self.b2 ** t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def remap_rows(self, name: str, kept: np.ndarray, n_new: int) -> None:
        """Keep moment rows ``kept`` and append ``n_new`` zero rows."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            old = store[name][kept]
            pad = np.zeros((n_new,) + old.shape[1:])
            store[name] = np.concatenate([old, pad])
