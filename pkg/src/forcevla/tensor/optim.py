"""Adam with global-norm clipping and a decaying learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.param_name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


@dataclass(frozen=True)
class LRSchedule:
    """Peak-to-floor decay over ``total_steps``; flat at ``floor`` afterwards."""

    peak: float = 2.5e-5
    floor: float = 2.5e-6
    total_steps: int = 30_000
    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def __call__(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        if self.total_steps <= 0 or step >= self.total_steps:
            return self.floor
        frac = step / self.total_steps
        if self.kind == "linear":
            w = 1.0 - frac
        else:
            w = 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.floor + (self.peak - self.floor) * w


def lr_at(step: int, schedule: LRSchedule = LRSchedule()) -> float:
    return schedule(step)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    lr_schedule: LRSchedule = field(default_factory=LRSchedule)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` jointly so their global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return list(grads), total


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              clip: float | None = 1.0, names: Sequence[str] | None = None) -> float:
    """In-place Adam update of ``params``. Returns the pre-clip gradient norm."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(names[i] if names else f"#{i}")
    grads, norm = clip_grad_norm(grads, clip)
    lr = state.lr_schedule(state.step)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return norm


class Adam:
    """Optimizer over named parameter tensors."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], schedule: LRSchedule,
                 betas=(0.9, 0.95), eps: float = 1e-8, clip: float | None = 1.0):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.clip = clip
        self.state = AdamState.for_params([p.data for p in self.params], beta1=betas[0],
                                          beta2=betas[1], epsilon=eps, lr_schedule=schedule)

    @property
    def lr(self) -> float:
        return self.state.lr_schedule(self.state.step)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        return adam_step([p.data for p in self.params], grads, self.state, self.clip, self.names)
