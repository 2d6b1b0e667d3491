"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .network import Network, mse_loss


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    net: Network,
    x: np.ndarray,
    eps: float = 1e-5,
    target: np.ndarray | None = None,
    mode: str = "train",
    seed: int = 0,
    check_input: bool = True,
) -> float:
    """Max relative error between backprop and central differences.

    The loss is ``mse_loss(net(x), target)``; ``target`` defaults to a seeded
    standard-normal tensor. Requires a float64 network. Train-mode forwards
    here never commit batchnorm statistics, so the network is left unchanged.
    """
    if net.dtype != np.float64:
        raise TypeError("grad_check needs a float64 network")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    if target is None:
        y0 = net.forward(x, mode)[0]
        target = np.random.default_rng(seed).standard_normal(y0.shape)

    def loss_at() -> float:
        return mse_loss(net.forward(x, mode)[0], target)[0]

    y, tape = net.forward(x, mode)
    _, g = mse_loss(y, target)
    grads, gx = net.backward(tape, g)

    worst = 0.0
    tensors = list(zip(net.parameters(), grads))
    if check_input:
        tensors.append((x, gx))
    for p, analytic in tensors:
        numeric = np.empty_like(p)
        flat = p.reshape(-1)
        out = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at()
            flat[i] = orig - eps
            down = loss_at()
            flat[i] = orig
            out[i] = (up - down) / (2 * eps)
        if p.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
