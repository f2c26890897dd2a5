"""SGD / AdamW update rules and the step learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor

DEFAULT_LR = 1e-3
DEFAULT_WEIGHT_DECAY = 1e-5
DEFAULT_MILESTONES = (30, 60, 90)
DEFAULT_FACTOR = 0.3


def steplr(epoch: int, lr0: float = DEFAULT_LR, milestones: Sequence[int] = DEFAULT_MILESTONES,
           factor: float = DEFAULT_FACTOR) -> float:
    """lr0 * factor ** (number of milestones <= epoch).

    The product is formed on the decimal values of ``lr0`` and ``factor`` and
    rounded once, so e.g. epoch 90 gives exactly ``2.7e-05`` rather than the
    accumulated binary rounding of three multiplications.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    k = sum(1 for m in milestones if m <= epoch)
    return float(Fraction(repr(lr0)) * Fraction(repr(factor)) ** k)


@dataclass
class OptimState:
    kind: str
    lr: float
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    momentum: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def _check(params, grads, state):
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is not None and p.shape != g.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        if state.kind == "adamw":
            state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params) or any(b.shape != p.shape for b, p in zip(state.m, params)):
        raise DimensionError("optimizer buffers do not match parameters")


def sgd_step(params: Sequence[Tensor], grads, state: OptimState) -> None:
    """p <- p - lr * (g + wd * p), with optional heavy-ball momentum on that direction."""
    _check(params, grads, state)
    state.step += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        d = g + state.weight_decay * p.data
        if state.momentum:
            state.m[i] = state.momentum * state.m[i] + d
            d = state.m[i]
        p.data -= state.lr * d


def adamw_step(params: Sequence[Tensor], grads, state: OptimState) -> None:
    """AdamW with bias correction and decoupled weight decay."""
    _check(params, grads, state)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        p.data *= 1.0 - state.lr * state.weight_decay
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def step(params: Sequence[Tensor], state: OptimState) -> None:
    grads = [p.grad for p in params]
    if state.kind == "sgd":
        sgd_step(params, grads, state)
    else:
        adamw_step(params, grads, state)
