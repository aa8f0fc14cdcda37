"""Adam optimizer over named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params) -> None:
        """Apply one update to every trainable parameter that holds a gradient."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            if not p.trainable or p.tensor.grad is None:
                continue
            g = p.tensor.grad
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(g)
                self.v[p.name] = np.zeros_like(g)
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.tensor.data -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    @staticmethod
    def zero_grad(params) -> None:
        for p in params:
            p.tensor.grad = None
