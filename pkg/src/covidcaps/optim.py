"""Adam optimizer over a named parameter set.

Standard exponential-moment Adam with bias correction; epsilon sits
outside the square root. Keeps one global step counter and lazily
allocates moment buffers the first time a parameter is updated, so the
trainable set may grow or shrink between steps (as it does when a model
head is replaced and the convolutional stack frozen).
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import ContractError, ParameterError
from .tensor import Tensor

__all__ = ["Adam"]


class Adam:
    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ParameterError(f"learning rate must be > 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ParameterError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if eps <= 0:
            raise ParameterError(f"eps must be > 0, got {eps}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        """Apply one update to every parameter that currently requires grad."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient; run backward first")
            g = p.grad
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bias1
            v_hat = v / bias2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
