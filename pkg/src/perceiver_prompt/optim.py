from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor


class MissingGradError(RuntimeError):
    pass


class Adam:
    """Adam with bias correction; moments kept per parameter, updated in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradError(f"parameter {p.name or i} has no gradient; call backward(loss, params) first")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def adam_step(opt: Adam) -> None:
    opt.step()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if total > max_norm and total > 0:
        s = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(s)
    return total
