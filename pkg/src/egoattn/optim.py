"""Optimizers and learning-rate schedules.

Updates apply only to parameters with requires_grad set; frozen parameters
are never touched, so freeze contracts are bit-exact.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LrSchedule:
    """Step schedule: lr(e) = base * factor^#{milestone t : t <= e}.

    Epochs are 0-indexed, so with base 1e-3, factor 0.1 and milestones
    (25, 75, 150) the first 25 epochs run at 1e-3.
    """
    base: float
    factor: float = 0.1
    milestones: tuple = ()

    def at(self, epoch: int) -> float:
        n = sum(1 for t in self.milestones if t <= epoch)
        return self.base * self.factor ** n


class Optimizer:
    def __init__(self, params):
        # dict name -> Tensor; order fixed at construction
        self.params = dict(params)
        self.lr = 0.0

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr, momentum=0.0):
        super().__init__(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = {n: np.zeros_like(t.data) for n, t in self.params.items()}

    def step(self):
        for name, t in self.params.items():
            if not t.requires_grad or t.grad is None:
                continue
            v = self._vel[name]
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v


class Adam(Optimizer):
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self._v = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self._t = 0

    def step(self):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self._t
        bias2 = 1.0 - b2 ** self._t
        for name, t in self.params.items():
            if not t.requires_grad or t.grad is None:
                continue
            m, v = self._m[name], self._v[name]
            m *= b1
            m += (1.0 - b1) * t.grad
            v *= b2
            v += (1.0 - b2) * t.grad * t.grad
            t.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
