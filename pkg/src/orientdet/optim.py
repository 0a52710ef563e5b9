"""SGD with momentum, decoupled weight decay, and a cosine learning rate."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class SGD:
    """Momentum SGD over a named parameter dict.

    Weight decay applies only to rank >= 2 parameters (conv kernels and
    projection matrices), never to biases or bounded-logit vectors.
    """

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.data.ndim >= 2:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            p.data += v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale all gradients so their global L2 norm is at most max_norm."""
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        norm = math.sqrt(total)
        if norm > max_norm > 0:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm


def cosine_lr(iteration: int, iter_max: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay from lr_start to lr_end over iter_max steps."""
    if iter_max <= 1:
        return lr_end
    t = min(max(iteration, 0), iter_max - 1) / (iter_max - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t))
