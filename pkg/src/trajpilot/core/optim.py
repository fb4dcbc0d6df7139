"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient contains NaN/Inf; the step is not applied."""


@dataclass
class OptimizerState:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Return updated parameter arrays; ``state`` is advanced in place.

    The whole step is rejected (nothing mutated) if any gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; step rejected")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append(p - state.lr * state.weight_decay * p - state.lr * update)
    return out


class AdamW:
    """Binds an ``OptimizerState`` to a list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adamw_step(self.state, [p.data for p in self.params], grads)
        for p, value in zip(self.params, new):
            p.data = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
