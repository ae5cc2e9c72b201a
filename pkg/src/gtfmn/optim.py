"""L1 loss and the Adam optimizer."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, apply_op


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at ties is 0."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff)

    def grad(g):
        gp = sign * (g / n)
        return gp, -gp

    return apply_op("l1_loss", np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred, target), grad)


def map_smoothness_loss(m: Tensor) -> Tensor:
    """Anisotropic total variation of an N x 1 x H x W map (mean |dx| + mean |dy|)."""
    d = m.data
    dx = d[..., :, 1:] - d[..., :, :-1]
    dy = d[..., 1:, :] - d[..., :-1, :]
    nx, ny = max(dx.size, 1), max(dy.size, 1)
    val = np.abs(dx).sum() / nx + np.abs(dy).sum() / ny

    def grad(g):
        out = np.zeros_like(d)
        sx = np.sign(dx) * (g / nx)
        sy = np.sign(dy) * (g / ny)
        out[..., :, 1:] += sx
        out[..., :, :-1] -= sx
        out[..., 1:, :] += sy
        out[..., :-1, :] -= sy
        return (out,)

    return apply_op("map_tv", np.asarray(val, dtype=m.dtype), (m,), grad)


class Adam:
    """Bias-corrected Adam: theta -= lr * m_hat / (sqrt(v_hat) + eps).

    ``milestones`` halves the learning rate (times ``gamma``) after each listed step.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        milestones: Sequence[int] = (),
        gamma: float = 0.5,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.milestones = sorted(milestones)
        self.gamma = gamma
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        passed = sum(1 for ms in self.milestones if self.t >= ms)
        return self.base_lr * self.gamma ** passed

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                name = p.name or f"#{i}"
                raise FloatingPointError(f"non-finite gradient in parameter {name} {p.shape}; step rejected")
        lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (lr / corr1) * m / (np.sqrt(v / corr2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out
