"""Parameter containers and the handful of layers the network needs."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes to find parameters (Tensors with requires_grad) and submodules."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match parameter {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, *, padding: int | None = None,
                 groups: int = 1, bias: bool = True, rng: np.random.Generator, dtype=np.float32):
        if padding is None:
            padding = kernel_size // 2
        self.in_ch, self.out_ch, self.kernel_size = in_ch, out_ch, kernel_size
        self.padding, self.groups = padding, groups
        fan_in = (in_ch // groups) * kernel_size * kernel_size
        bound = 1.0 / math.sqrt(fan_in)
        shape = (out_ch, in_ch // groups, kernel_size, kernel_size)
        self.weight = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, out_ch).astype(dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding, groups=self.groups)


class ChannelNorm(Module):
    """Layer norm across channels per spatial position, with per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-6, dtype=np.float32):
        self.eps = eps
        self.weight = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.channel_norm(x, self.eps), self.weight), self.bias)
