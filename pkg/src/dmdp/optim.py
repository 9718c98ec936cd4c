"""First-order optimizers over autodiff leaves."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import FrozenParameterError


def _check_params(params: Sequence[Tensor]) -> list[Tensor]:
    params = list(params)
    for p in params:
        if p.frozen:
            raise FrozenParameterError(f"optimizer given frozen parameter {p.name!r}")
    return params


class SGD:
    """SGD with classical momentum; ``lr`` is passed per step for scheduling."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = _check_params(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.frozen:
                raise FrozenParameterError(f"step on frozen parameter {p.name!r}")
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = _check_params(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                raise FrozenParameterError(f"step on frozen parameter {p.name!r}")
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
