"""Optimizers, learning-rate schedule and parameter initialisation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, parameter


class DivergenceError(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def _check_finite(params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            raise ValueError("missing gradient for a parameter")
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError("non-finite gradient")


@dataclass
class SGD:
    params: list[Tensor]
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    steps: int = 0
    buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        """One update; parameters without a gradient are treated as zero-grad."""
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        _check_finite(self.params)
        for p, buf in zip(self.params, self.buffers):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf *= self.momentum
                buf += g
                g = buf
            p.data -= lr * g
        self.steps += 1


@dataclass
class Adam:
    params: list[Tensor]
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        _check_finite(self.params)
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients together so their global L2 norm is at most max_norm.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        for g in grads:
            g *= max_norm / total
    return total


def make_optimizer(kind: str, params, lr: float, momentum: float = 0.0,
                   weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
