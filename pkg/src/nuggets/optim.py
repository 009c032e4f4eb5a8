from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DivergenceError(RuntimeError):
    pass


class Adam:
    """Adam with decoupled weight decay; defaults follow betas (0.9, 0.95), eps 1e-5."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.95), eps=1e-5, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                upd = upd + self.wd * p.data
            p.data -= lr * upd


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if not math.isfinite(total):
        raise DivergenceError(f"non-finite gradient norm {total}")
    if max_norm and total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * f
    return total


@dataclass
class CosineSchedule:
    """Linear warmup then cosine decay to ``min_frac * lr`` at ``total`` steps."""

    lr: float = 3e-4
    warmup: int = 200
    total: int = 10000
    min_frac: float = 0.1

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.total - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        return self.lr * (self.min_frac + (1 - self.min_frac) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class TrainSettings:
    steps: int = 2000
    lr: float = 3e-4
    warmup: int = 200
    batch_size: int = 16
    clip: float = 1.0
    min_lr_frac: float = 0.1
    seed: int = 0
    log_every: int = 50


def fit(params, loss_fn, settings: TrainSettings, on_step=None) -> list:
    """Generic loop: ``loss_fn(step, rng)`` returns a scalar loss Tensor.

    ``on_step(step, loss)`` may return True to stop early. Returns the loss
    history. A non-finite loss raises DivergenceError.
    """
    params = list(params)
    opt = Adam(params, lr=settings.lr)
    sched = CosineSchedule(settings.lr, settings.warmup, settings.steps, settings.min_lr_frac)
    rng = np.random.default_rng(settings.seed)
    history = []
    for step in range(settings.steps):
        opt.zero_grad()
        loss = loss_fn(step, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        loss.backward()
        clip_grad_norm(params, settings.clip)
        opt.step(sched(step))
        history.append(value)
        if on_step is not None and on_step(step, value):
            break
    return history
