"""Noise schedule, denoiser training and single-model ancestral sampling.

Arrays indexed by diffusion step ``s`` are stored with length ``S + 1`` so that
``alpha_bar[s]`` is the signal coefficient at step ``s`` (``alpha_bar[0] == 1``).
``beta`` and ``sigma`` carry a zero placeholder at index 0.
"""
from __future__ import annotations

import csv
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .denoiser import DenoiserConfig, UNet1D
from .numerics import EMA, Adam, Tensor, backward, load_checkpoint, mse, mul, no_grad, save_checkpoint, tsum

log = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class TrainingError(RuntimeError):
    pass


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    S: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    model_steps: np.ndarray | None = None   # respaced level -> training step fed to the network

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    def model_step(self, s: int) -> int:
        return int(self.model_steps[s]) if self.model_steps is not None else s


def _cosine_f(s, S):
    return np.cos(((np.asarray(s, dtype=np.float64) / S + COSINE_OFFSET) / (1 + COSINE_OFFSET)) * np.pi / 2) ** 2


def cosine_schedule(S: int = 1000) -> DiffusionSchedule:
    if S < 1:
        raise ValueError(f"schedule needs S >= 1, got {S}")
    steps = np.arange(S + 1)
    f = _cosine_f(steps, S)
    alpha_bar = f / f[0]
    beta, sigma = _from_alpha_bar(alpha_bar)
    return DiffusionSchedule(S, beta, alpha_bar, sigma)


def _from_alpha_bar(alpha_bar: np.ndarray):
    beta = np.zeros_like(alpha_bar)
    beta[1:] = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], MAX_BETA)
    sigma = np.zeros_like(alpha_bar)
    sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return beta, sigma


def respace(schedule: DiffusionSchedule, n_steps: int) -> DiffusionSchedule:
    """Sampling schedule over ``n_steps`` evenly spaced training steps (ending at ``S``)."""
    if not 1 <= n_steps <= schedule.S:
        raise ValueError(f"cannot respace {schedule.S} steps to {n_steps}")
    kept = np.unique(np.round(np.linspace(0, schedule.S, n_steps + 1)).astype(int))
    alpha_bar = schedule.alpha_bar[kept]
    beta, sigma = _from_alpha_bar(alpha_bar)
    return DiffusionSchedule(len(kept) - 1, beta, alpha_bar, sigma, kept)


def _expand(v, ndim):
    v = np.asarray(v)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(z0, s, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """Noise clean ``z0`` to level ``s`` (scalar or per-batch): ``sqrt(ab) z0 + sqrt(1-ab) eps``."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"q_sample: z0 {z0.shape} and eps {eps.shape} differ")
    ab = schedule.alpha_bar[np.asarray(s)]
    a = _expand(np.sqrt(ab), z0.ndim)
    b = _expand(np.sqrt(1.0 - ab), z0.ndim)
    return (a * z0 + b * eps).astype(z0.dtype, copy=False)


# feature scaling ---------------------------------------------------------------

@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature affine map from box units to the network's space (``(u - shift) / scale``)."""

    shift: tuple[float, ...] = (0.5, 0.5, 0.0, 0.0)
    scale: tuple[float, ...] = (0.4, 0.4, 0.5, 0.5)

    def _tile(self, v, channels):
        v = np.asarray(v, dtype=np.float64)
        return np.tile(v, channels // v.size)

    def to_model(self, u: np.ndarray) -> np.ndarray:
        c = u.shape[-1]
        return (u - self._tile(self.shift, c)) / self._tile(self.scale, c)

    def to_box(self, z: np.ndarray) -> np.ndarray:
        c = z.shape[-1]
        return z * self._tile(self.scale, c) + self._tile(self.shift, c)

    def grad_to_model(self, g_box: np.ndarray) -> np.ndarray:
        """Chain rule for a gradient taken w.r.t. box units."""
        return g_box * self._tile(self.scale, g_box.shape[-1])


def extract_windows(data: np.ndarray, window_len: int, stride: int = 1) -> np.ndarray:
    """Sliding windows ``[N, T, B, 4] -> [M, window_len, B*4]``."""
    data = np.asarray(data)
    n, t, b, f = data.shape
    if t < window_len:
        raise ValueError(f"trajectories of {t} frames are shorter than window {window_len}")
    starts = range(0, t - window_len + 1, stride)
    out = np.stack([data[:, s:s + window_len] for s in starts], axis=1)
    return out.reshape(-1, window_len, b * f)


# model bundle ------------------------------------------------------------------

@contextmanager
def _frozen(params):
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


class DiffusionModel:
    """Denoiser + schedule + scaler; ``eps`` evaluates the noise prediction in model space."""

    def __init__(self, config: DenoiserConfig, schedule: DiffusionSchedule | None = None,
                 scaler: FeatureScaler | None = None):
        self.config = config
        self.schedule = schedule or cosine_schedule()
        self.scaler = scaler or FeatureScaler()
        self.net = UNet1D(config)

    @property
    def window_len(self) -> int:
        return self.config.window_len

    @property
    def channels(self) -> int:
        return self.config.channels

    @property
    def n_bodies(self) -> int:
        return self.config.channels // 4

    def eps(self, z: np.ndarray, s) -> np.ndarray:
        with no_grad():
            return self.net(Tensor(np.asarray(z, dtype=np.float32)), s).data

    __call__ = eps

    def eps_with_pullback(self, z: np.ndarray, s):
        """Noise prediction plus ``v -> J^T v`` for its Jacobian w.r.t. ``z``.

        Weights are frozen while the graph is built and walked, so no weight
        gradients are computed or accumulated.
        """
        params = self.net.parameters()
        zt = Tensor(np.asarray(z, dtype=np.float32), requires_grad=True)
        with _frozen(params):
            out = self.net(zt, s)

        def pullback(v: np.ndarray) -> np.ndarray:
            zt.grad = None
            with _frozen(params):
                backward(tsum(mul(out, Tensor(np.asarray(v, dtype=out.dtype)))))
            return np.asarray(zt.grad, dtype=np.float64)
        return out.data, pullback

    def save(self, path, meta: dict | None = None, adam=None, ema: dict | None = None) -> None:
        m = {"kind": "diffusion", "denoiser": self.config.to_dict(), "S": self.schedule.S,
             "scaler": asdict(self.scaler)}
        m.update(meta or {})
        save_checkpoint(path, self.net.state_dict(), m, adam, ema)

    @classmethod
    def load(cls, path, use_ema: bool = True) -> "DiffusionModel":
        ck = load_checkpoint(path)
        meta = ck["meta"]
        if meta.get("kind") != "diffusion":
            raise ValueError(f"{path} is not a diffusion checkpoint")
        cfg = DenoiserConfig(**meta["denoiser"])
        sc = meta["scaler"]
        model = cls(cfg, cosine_schedule(meta["S"]), FeatureScaler(tuple(sc["shift"]), tuple(sc["scale"])))
        weights = ck["ema"] if use_ema and ck["ema"] else ck["params"]
        model.net.load_state_dict(weights)
        return model


# training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    total_steps: int = 20_000
    lr_decay_start: int = 0          # 0 disables StepLR
    lr_decay_every: int = 40_000
    lr_decay_factor: float = 0.5
    ema_decay: float = 0.95
    checkpoint_every: int = 10_000
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.total_steps < 0:
            raise ValueError("batch_size, lr and total_steps must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in (0, 1), got {self.ema_decay}")

    def lr_at(self, step: int) -> float:
        if not self.lr_decay_start or step < self.lr_decay_start:
            return self.lr
        k = (step - self.lr_decay_start) // self.lr_decay_every + 1
        return self.lr * self.lr_decay_factor ** k


@dataclass
class TrainResult:
    model: DiffusionModel
    ema: dict
    losses: list = field(default_factory=list)


def train(model: DiffusionModel, windows: np.ndarray, config: TrainConfig,
          out_dir=None, progress: Callable | None = None) -> TrainResult:
    """Fit the noise predictor on box-unit windows ``[M, T, C]`` with the MSE denoising loss.

    The returned model carries the EMA weights; raw weights stay in ``result.ema``'s
    counterpart checkpoint (``last.ckpt``) when ``out_dir`` is given.
    """
    windows = np.asarray(windows)
    if windows.ndim != 3 or len(windows) == 0:
        raise TrainingError(f"need a non-empty [M, T, C] window array, got {windows.shape}")
    if windows.shape[1:] != (model.window_len, model.channels):
        raise TrainingError(f"windows {windows.shape[1:]} do not match model "
                            f"({model.window_len}, {model.channels})")
    data = model.scaler.to_model(windows).astype(np.float32)
    rng = np.random.default_rng(config.seed)
    net = model.net
    opt = Adam(net.parameters(), lr=config.lr)
    ema = EMA(net.named_parameters(), config.ema_decay)
    S = model.schedule.S
    losses = []
    out = Path(out_dir) if out_dir else None
    log_fh = writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(["step", "loss", "lr", "ema_decay"])
    t0 = time.time()
    try:
        for step in range(1, config.total_steps + 1):
            idx = rng.integers(0, len(data), config.batch_size)
            z0 = data[idx]
            s = rng.integers(1, S + 1, config.batch_size)
            eps = rng.standard_normal(z0.shape).astype(np.float32)
            zs = q_sample(z0, s, eps, model.schedule)
            opt.lr = config.lr_at(step)
            loss = mse(net(Tensor(zs), s), Tensor(eps))
            val = float(loss.data)
            if not np.isfinite(val):
                raise TrainingError(f"non-finite loss {val} at step {step} (lr={opt.lr}, "
                                    f"|z|max={np.abs(zs).max():.3g})")
            opt.zero_grad()
            backward(loss)
            opt.step()
            ema.update(net.named_parameters())
            losses.append(val)
            if writer and (step % config.log_every == 0 or step == config.total_steps):
                writer.writerow([step, f"{np.mean(losses[-config.log_every:]):.6g}", opt.lr, config.ema_decay])
            if progress and step % config.log_every == 0:
                progress(step, float(np.mean(losses[-config.log_every:])), time.time() - t0)
            if out and config.checkpoint_every and step % config.checkpoint_every == 0:
                model.save(out / f"step{step:07d}.ckpt", {"step": step}, opt.state, ema.shadow)
    finally:
        if log_fh:
            log_fh.close()
    if out:
        model.save(out / "last.ckpt", {"step": config.total_steps}, opt.state, ema.shadow)
    raw = net.state_dict()
    net.load_state_dict(ema.shadow)
    return TrainResult(model, raw, losses)


# sampling ---------------------------------------------------------------------

GuidanceFn = Callable[[np.ndarray], np.ndarray]


GUIDE_ON = ("estimate", "noisy")


def guidance_scale(s: int, schedule: DiffusionSchedule, space: str = "eps") -> float:
    """Weight ``c_s`` on the objective gradient inside the noise estimate.

    * ``"eps"``: ``sqrt(1 - alpha_bar(s))``, the score-consistent scaling;
    * ``"raw"``: 1, the gradient added to the noise estimate as is;
    * ``"sample"``: ``sqrt(alpha_s (1 - alpha_bar(s))) / beta_s``, so that the
      ancestral step moves the sample by exactly ``-lam * grad``.
    """
    ab = schedule.alpha_bar[s]
    if space == "eps":
        return float(np.sqrt(1.0 - ab))
    if space == "raw":
        return 1.0
    if space == "sample":
        return float(np.sqrt(schedule.alpha[s] * (1.0 - ab)) / schedule.beta[s])
    raise ValueError(f"unknown guidance space {space!r}")


def guided_eps(eps_hat: np.ndarray, z: np.ndarray, s: int, schedule: DiffusionSchedule,
               guidance: GuidanceFn | None, lam: float, space: str = "eps") -> np.ndarray:
    """``eps_hat + lam * c_s * grad J(z)`` with the gradient taken at the noisy sample itself."""
    if guidance is None or lam == 0.0:
        return eps_hat
    return eps_hat + (lam * guidance_scale(s, schedule, space)) * guidance(z)


def clean_estimate(z: np.ndarray, eps: np.ndarray, s: int, schedule: DiffusionSchedule) -> np.ndarray:
    ab = schedule.alpha_bar[s]
    return (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def estimate_guidance(z: np.ndarray, eps: np.ndarray, pullback: Callable, s: int,
                      schedule: DiffusionSchedule, guidance: GuidanceFn) -> np.ndarray:
    """``sqrt(alpha_bar) * grad_z J(x0_hat(z))`` through the noise predictor.

    With ``g = grad J`` at the clean estimate this is ``g - sqrt(1 - alpha_bar) * J_eps^T g``;
    the Jacobian term carries a final-frame gradient back along the predicted dynamics.
    The ``sqrt(alpha_bar)`` factor keeps the step bounded at high noise.
    """
    g = guidance(clean_estimate(z, eps, s, schedule))
    return g - np.sqrt(1.0 - schedule.alpha_bar[s]) * pullback(g)


def guided_noise(z: np.ndarray, s: int, schedule: DiffusionSchedule, predict: Callable,
                 predict_with_pullback: Callable | None, guidance: GuidanceFn | None, lam: float,
                 space: str = "eps", guide_on: str = "estimate") -> np.ndarray:
    """Guided noise estimate at level ``s``; ``predict(z, step)`` is the network call.

    ``guide_on="estimate"`` evaluates the objective on the clean-sample estimate and
    needs ``predict_with_pullback(z, step) -> (eps, pullback)``; ``"noisy"`` uses ``z``.
    """
    if guide_on not in GUIDE_ON:
        raise ValueError(f"guide_on must be one of {GUIDE_ON}, got {guide_on!r}")
    step = schedule.model_step(s)
    if guidance is None or lam == 0.0 or guide_on == "noisy":
        return guided_eps(predict(z, step), z, s, schedule, guidance, lam, space)
    if predict_with_pullback is None:
        raise ValueError("guidance on the clean estimate needs a model with a pullback")
    eps, pullback = predict_with_pullback(z, step)
    eps = np.asarray(eps, dtype=np.float64)
    return eps + (lam * guidance_scale(s, schedule, space)) * estimate_guidance(z, eps, pullback, s, schedule,
                                                                               guidance)


X0_CLIP = 2.0


def clip_eps(z: np.ndarray, eps: np.ndarray, s: int, schedule: DiffusionSchedule,
             bound: float | None) -> np.ndarray:
    """Noise estimate consistent with the implied clean sample clipped to ``[-bound, bound]``.

    Returns ``eps`` unchanged (same object) when ``bound`` is None or nothing is clipped,
    so the update matches the unclipped form exactly on in-range samples.
    """
    if bound is None:
        return eps
    ab = schedule.alpha_bar[s]
    x0 = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    if np.all(np.abs(x0) <= bound):
        return eps
    return (z - np.sqrt(ab) * np.clip(x0, -bound, bound)) / np.sqrt(1.0 - ab)


def ddpm_transition(z: np.ndarray, eps: np.ndarray, s: int, schedule: DiffusionSchedule,
                    rng: np.random.Generator, eta: float = 1.0, clip_x0: float | None = None) -> np.ndarray:
    """Ancestral step ``s -> s-1``; no noise is added on the final step.

    With ``clip_x0`` the noise estimate is first made consistent with a clipped
    clean-sample estimate, which keeps model error from being amplified by the
    large ``1/sqrt(alpha_s)`` of the last noise levels.
    """
    eps = clip_eps(z, eps, s, schedule, clip_x0)
    a = schedule.alpha[s]
    coef = eta * schedule.beta[s] / np.sqrt(1.0 - schedule.alpha_bar[s])
    mean = (z - coef * eps) / np.sqrt(a)
    if s > 1:
        mean = mean + schedule.sigma[s] * rng.standard_normal(z.shape)
    return mean


def sample(model, schedule: DiffusionSchedule, n: int, guidance: GuidanceFn | None = None,
           lam: float = 0.0, rng: np.random.Generator | None = None, eta: float = 1.0,
           guidance_space: str = "eps", shape: tuple | None = None,
           clip_x0: float | None = None, guide_on: str = "estimate") -> np.ndarray:
    """Ancestral sampling in model space from ``z_S ~ N(0, I)``.

    ``model(z, s)`` returns the noise prediction; ``shape`` defaults to the
    model's ``(window_len, channels)``; ``clip_x0=None`` gives the plain update.
    Guidance on the clean estimate needs ``model.eps_with_pullback``.
    Returns ``[n, *shape]`` model-space samples.
    """
    rng = rng if rng is not None else np.random.default_rng()
    shape = shape or (model.window_len, model.channels)
    z = rng.standard_normal((n, *shape))
    for s in range(schedule.S, 0, -1):
        eps = guided_noise(z, s, schedule, model, getattr(model, "eps_with_pullback", None), guidance, lam,
                           guidance_space, guide_on)
        z = ddpm_transition(z, eps, s, schedule, rng, eta, clip_x0)
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite sample at diffusion step {s}")
    return z
