"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError


class Adam:
    """Mini-batch Adam over a fixed, named set of parameter tensors.

    Holds first/second moment estimates per parameter and a step counter.
    ``lr`` may be reassigned between steps to follow a schedule.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        """Apply one bias-corrected update using each parameter's .grad."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad_or_zeros()
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adam: gradient shape {g.shape} != parameter {name} shape {p.data.shape}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
