"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: list[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    For each parameter tensor the error is
    ``|a - fd| / (|a| + |fd| + 1e-12)`` with ``|.|`` the l2 norm over the
    checked entries. ``max_entries`` caps how many entries per tensor are
    perturbed (chosen with ``rng``); ``None`` checks all of them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not np.isfinite(analytic).all():
            raise FloatingPointError("non-finite analytic gradient")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        fd = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            fd[n] = (up - down) / (2 * eps)
        if not np.isfinite(fd).all():
            raise FloatingPointError("non-finite finite-difference gradient")
        a = analytic.reshape(-1)[idx]
        err = np.linalg.norm(a - fd) / (np.linalg.norm(a) + np.linalg.norm(fd) + 1e-12)
        worst = max(worst, float(err))
    return worst
