"""Adam with decoupled weight decay, and a reduce-on-plateau scheduler."""

from __future__ import annotations

import numpy as np

from .tape import Tensor


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8).

    Weight decay is decoupled: parameters shrink by lr*wd*param before the
    moment-based update, so decay never enters the moment buffers.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 8e-4,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class PlateauScheduler:
    """Halve the learning rate when validation loss stops improving.

    An epoch counts as improving when its loss beats the best seen so far
    by at least ``threshold`` relative.  After ``patience`` consecutive
    non-improving epochs the rate is multiplied by ``factor`` (never below
    ``min_lr``) and the stall counter resets.
    """

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 100,
                 threshold: float = 1e-4, min_lr: float = 1e-6):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.stalled = 0

    @property
    def lr(self) -> float:
        return self.optimizer.lr

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.patience:
                self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
                self.stalled = 0
        return self.optimizer.lr
