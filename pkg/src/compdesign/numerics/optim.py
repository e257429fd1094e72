"""Adam with bias correction, and an exponential moving average of weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        arrays = [_arr(p) for p in params]
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **kw)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def adam_step(state: AdamState, params, grads) -> list[np.ndarray]:
    """One Adam update. Mutates ``state`` moments/step; returns the new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = _arr(p)
        g = np.asarray(g, dtype=p.dtype) if g is not None else np.zeros_like(p)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: param {i} shape {p.shape}, grad {g.shape}")
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out


class Adam:
    """Stateful wrapper that updates ``Tensor`` parameters in place from their ``.grad``."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        new = adam_step(self.state, self.params, grads)
        for p, n in zip(self.params, new):
            p.data = n.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class EMA:
    """Shadow weights ``shadow <- decay * shadow + (1 - decay) * w``."""

    def __init__(self, params: dict, decay: float = 0.95):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"ema decay must be in (0, 1), got {decay}")
        self.decay = decay
        self.shadow = {k: _arr(v).copy() for k, v in params.items()}

    def update(self, params: dict) -> None:
        d = self.decay
        for k, v in params.items():
            self.shadow[k] = d * self.shadow[k] + (1.0 - d) * _arr(v)
