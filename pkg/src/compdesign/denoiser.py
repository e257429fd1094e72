"""Time-conditioned 1-D U-Net noise predictor over trajectory windows.

A trajectory window ``[T, B, 4]`` is flattened to ``[T, B*4]`` channels and
convolved along time. Layout inside the network is channels-last ``[batch, T, C]``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import nn
from .numerics import tensor as T
from .numerics.tensor import ShapeError, Tensor


@dataclass
class DenoiserConfig:
    window_len: int = 24
    channels: int = 8
    base_width: int = 32
    depth: int = 3
    channel_factors: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    step_embed_dim: int = 32
    groups: int = 8
    gated_mixing: bool = True
    time_conditioned: bool = True
    seed: int = 0

    def __post_init__(self):
        self.channel_factors = tuple(int(c) for c in self.channel_factors)
        if len(self.channel_factors) != self.depth:
            raise ValueError(f"channel_factors {self.channel_factors} must have depth={self.depth} entries")
        if self.window_len % (2 ** self.depth):
            raise ValueError(f"window_len {self.window_len} not divisible by 2**depth={2 ** self.depth}")
        if self.step_embed_dim % 2:
            raise ValueError("step_embed_dim must be even")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * f for f in self.channel_factors]

    @property
    def embed_hidden(self) -> int:
        return 2 * self.step_embed_dim if self.time_conditioned else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_factors"] = list(self.channel_factors)
        return d


def _groups(c: int, g: int) -> int:
    g = min(g, c)
    while c % g:
        g -= 1
    return g


def sinusoidal_embedding(s, dim: int) -> np.ndarray:
    """``[len(s), dim]`` sin/cos features of the diffusion step."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int, rng):
        self.norm1 = nn.GroupNorm(_groups(c_in, groups), c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, rng)
        self.emb = nn.Linear(emb_dim, c_out, rng) if emb_dim else None
        self.norm2 = nn.GroupNorm(_groups(c_out, groups), c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, rng)
        self.skip = nn.Conv1d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        if self.emb is not None:
            e = self.emb(emb)
            h = h + T.reshape(e, (e.shape[0], 1, e.shape[1]))
        h = self.conv2(T.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class GatedMix(nn.Module):
    """``x + a(x) * sigmoid(b(x))`` with 1x1 convolutions (stand-in for attention)."""

    def __init__(self, c: int, rng):
        self.value = nn.Conv1d(c, c, 1, rng)
        self.gate = nn.Conv1d(c, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.value(x) * T.sigmoid(self.gate(x))


class Level(nn.Module):
    def __init__(self, blocks, resample=None):
        self.blocks = list(blocks)
        self.resample = resample


class UNet1D(nn.Module):
    def __init__(self, config: DenoiserConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        emb = c.embed_hidden
        if c.time_conditioned:
            self.embed1 = nn.Linear(c.step_embed_dim, emb, rng)
            self.embed2 = nn.Linear(emb, emb, rng)
        widths = c.widths
        self.init_conv = nn.Conv1d(c.channels, widths[0], 3, rng)
        self.down = []
        prev = widths[0]
        for w in widths:
            blocks = []
            for _ in range(c.blocks_per_level):
                blocks.append(ResBlock(prev, w, emb, c.groups, rng))
                prev = w
            self.down.append(Level(blocks, nn.Conv1d(w, w, 3, rng, stride=2, pad=1)))
        self.mid1 = ResBlock(prev, prev, emb, c.groups, rng)
        self.mid_mix = GatedMix(prev, rng) if c.gated_mixing else None
        self.mid2 = ResBlock(prev, prev, emb, c.groups, rng)
        self.up = []
        for w in reversed(widths):
            blocks = []
            for b in range(c.blocks_per_level):
                blocks.append(ResBlock(prev + w if b == 0 else w, w, emb, c.groups, rng))
                prev = w
            self.up.append(Level(blocks))
        self.out_norm = nn.GroupNorm(_groups(widths[0], c.groups), widths[0])
        self.out_conv = nn.Conv1d(widths[0], c.channels, 3, rng, zero=True)

    def embed(self, s, batch: int) -> Tensor | None:
        if not self.config.time_conditioned:
            return None
        s = np.broadcast_to(np.asarray(s), (batch,))
        e = Tensor(sinusoidal_embedding(s, self.config.step_embed_dim).astype(self.out_conv.weight.dtype))
        return self.embed2(T.silu(self.embed1(e)))

    def forward(self, z, s=0) -> Tensor:
        """``z``: ``[batch, window_len, channels]``; ``s``: scalar or per-batch diffusion steps."""
        z = T.as_tensor(z)
        c = self.config
        if z.ndim != 3 or z.shape[1] != c.window_len or z.shape[2] != c.channels:
            raise ShapeError(f"denoiser expects [batch, {c.window_len}, {c.channels}], got {z.shape}")
        emb = self.embed(s, z.shape[0])
        h = self.init_conv(z)
        skips = []
        for level in self.down:
            for blk in level.blocks:
                h = blk(h, emb)
            skips.append(h)
            h = level.resample(h)
        h = self.mid1(h, emb)
        if self.mid_mix is not None:
            h = self.mid_mix(h)
        h = self.mid2(h, emb)
        for level, skip in zip(self.up, reversed(skips)):
            h = T.upsample_nearest(h, 2, axis=1)
            h = T.concat([h, skip], axis=2)
            for blk in level.blocks:
                h = blk(h, emb)
        return self.out_conv(T.silu(self.out_norm(h)))


def expected_parameter_count(c: DenoiserConfig) -> int:
    """Closed-form parameter count for :class:`UNet1D` built from ``c``.

    conv(k, i, o) = k*i*o + o; linear(i, o) = i*o + o; groupnorm(ch) = 2*ch;
    resblock(i, o) = gn(i) + conv(3,i,o) + [linear(E,o)] + gn(o) + conv(3,o,o) + [conv(1,i,o) if i != o].
    """
    E = c.embed_hidden

    def conv(k, i, o):
        return k * i * o + o

    def lin(i, o):
        return i * o + o

    def res(i, o):
        n = 2 * i + conv(3, i, o) + 2 * o + conv(3, o, o)
        if E:
            n += lin(E, o)
        if i != o:
            n += conv(1, i, o)
        return n

    w = c.widths
    total = lin(c.step_embed_dim, E) + lin(E, E) if c.time_conditioned else 0
    total += conv(3, c.channels, w[0])
    prev = w[0]
    for wi in w:
        for _ in range(c.blocks_per_level):
            total += res(prev, wi)
            prev = wi
        total += conv(3, wi, wi)
    total += 2 * res(prev, prev)
    if c.gated_mixing:
        total += 2 * conv(1, prev, prev)
    for wi in reversed(w):
        for b in range(c.blocks_per_level):
            total += res(prev + wi if b == 0 else wi, wi)
            prev = wi
    total += 2 * w[0] + conv(3, w[0], c.channels)
    return total


def score_from_eps(eps_hat, schedule, s) -> np.ndarray:
    """Score estimate ``-eps_hat / sqrt(1 - alpha_bar(s))`` (the negative energy gradient).

    Raises at ``s == 0`` where the noise scale vanishes.
    """
    s_arr = np.asarray(s)
    if np.any(s_arr <= 0):
        raise ValueError("score_from_eps is undefined at diffusion step 0")
    eps = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
    scale = np.sqrt(1.0 - schedule.alpha_bar[s_arr])
    scale = np.reshape(scale, np.shape(scale) + (1,) * (eps.ndim - np.ndim(scale)))
    return -eps / scale
