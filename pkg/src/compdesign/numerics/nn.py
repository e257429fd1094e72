"""Small parameter containers on top of :mod:`compdesign.numerics.tensor`."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor, get_default_dtype


class Module:
    """Base class: parameters are attributes that are ``Tensor``\\ s with ``requires_grad``.

    Child modules may be stored as attributes or inside lists.
    """

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise T.ShapeError(f"parameter {k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=get_default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        b = np.zeros(n_out) if zero else rng.uniform(-bound, bound, n_out)
        self.weight = _param(w)
        self.bias = _param(b)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Conv1d(Module):
    """Channels-last convolution, weight ``[K, Cin, Cout]``."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, zero: bool = False):
        fan_in = c_in * kernel
        bound = 1.0 / np.sqrt(fan_in)
        shape = (kernel, c_in, c_out)
        self.weight = _param(np.zeros(shape) if zero else rng.uniform(-bound, bound, shape))
        self.bias = _param(np.zeros(c_out) if zero else rng.uniform(-bound, bound, c_out))
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.pad)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups:
            raise T.ShapeError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)
