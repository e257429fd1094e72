"""Surrogate forward models and the two surrogate-based designers (CEM and backprop).

A surrogate maps a conditioning frame ``[C]`` (``C = B*4``, model space) to the
next ``horizon`` frames. The 1-step variant rolls out autoregressively, the
23-step variant re-conditions on its last predicted frame every 23 steps.
Both use the denoiser's U-Net without step conditioning; the input is the
conditioning frame tiled over the window and the output is a residual on it.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .compose import DesignObjective, objective_and_grad
from .denoiser import DenoiserConfig, UNet1D
from .diffusion import FeatureScaler, extract_windows
from .numerics import Adam, AdamState, Tensor, adam_step, backward, concat, load_checkpoint, mse, no_grad
from .numerics import mul, reshape, save_checkpoint, tsum

log = logging.getLogger(__name__)

VARIANTS = {"1-step": 1, "23-step": 23}


class BaselineError(RuntimeError):
    pass


def default_backbone(variant: str, n_bodies: int = 2, **kw) -> DenoiserConfig:
    horizon = VARIANTS[variant]
    if horizon == 1:
        cfg = dict(window_len=2, depth=1, channel_factors=(1,), blocks_per_level=1)
    else:
        cfg = dict(window_len=horizon + 1, depth=3, channel_factors=(1, 2, 2), blocks_per_level=1)
    cfg.update(channels=4 * n_bodies, time_conditioned=False, gated_mixing=False)
    cfg.update(kw)
    return DenoiserConfig(**cfg)


class SurrogateModel:
    def __init__(self, variant: str, config: DenoiserConfig | None = None,
                 scaler: FeatureScaler | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown surrogate variant {variant!r}; choose from {sorted(VARIANTS)}")
        self.variant = variant
        self.horizon = VARIANTS[variant]
        self.config = config or default_backbone(variant)
        if self.config.window_len != self.horizon + 1:
            raise ValueError(f"{variant} surrogate needs window_len {self.horizon + 1}, "
                             f"got {self.config.window_len}")
        self.scaler = scaler or FeatureScaler()
        self.net = UNet1D(self.config)

    @property
    def channels(self) -> int:
        return self.config.channels

    @property
    def n_bodies(self) -> int:
        return self.channels // 4

    def predict(self, x0: Tensor) -> Tensor:
        """``[b, C]`` conditioning frames -> ``[b, horizon, C]`` predicted frames (model space)."""
        b, c = x0.shape
        tiled = concat([reshape(x0, (b, 1, c))] * (self.horizon + 1), axis=1)
        return (tiled + self.net(tiled))[:, 1:]

    def rollout_tensor(self, x0: Tensor, T_total: int) -> Tensor:
        """Chained prediction ``[b, C] -> [b, T_total, C]``; frame 0 is ``x0``."""
        if T_total < 1:
            raise ValueError("T_total must be >= 1")
        b, c = x0.shape
        frames = [reshape(x0, (b, 1, c))]
        have = 1
        cond = x0
        while have < T_total:
            seg = self.predict(cond)
            frames.append(seg)
            have += self.horizon
            cond = seg[:, -1]
        traj = concat(frames, axis=1)
        return traj if have == T_total else traj[:, :T_total]

    def rollout(self, gamma: np.ndarray, T_total: int) -> np.ndarray:
        """Box-unit rollout ``[n, B, 4] -> [n, T_total, B, 4]``."""
        gamma = np.asarray(gamma, dtype=np.float64)
        n = gamma.shape[0]
        x0 = self.scaler.to_model(gamma.reshape(n, -1))
        with no_grad():
            traj = self.rollout_tensor(Tensor(x0.astype(np.float32)), T_total).data
        return self.scaler.to_box(traj.astype(np.float64)).reshape(n, T_total, -1, 4)

    def save(self, path, meta: dict | None = None) -> None:
        m = {"kind": "surrogate", "variant": self.variant, "denoiser": self.config.to_dict(),
             "scaler": {"shift": list(self.scaler.shift), "scale": list(self.scaler.scale)}}
        m.update(meta or {})
        save_checkpoint(path, self.net.state_dict(), m)

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        ck = load_checkpoint(path)
        meta = ck["meta"]
        if meta.get("kind") != "surrogate":
            raise ValueError(f"{path} is not a surrogate checkpoint")
        sc = meta["scaler"]
        model = cls(meta["variant"], DenoiserConfig(**meta["denoiser"]),
                    FeatureScaler(tuple(sc["shift"]), tuple(sc["scale"])))
        model.net.load_state_dict(ck["params"])
        return model


# training ---------------------------------------------------------------------

@dataclass
class SurrogateTrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    total_steps: int = 5000
    val_fraction: float = 0.1
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.total_steps < 0:
            raise ValueError("batch_size, lr and total_steps must be positive")


@dataclass
class SurrogateTrainResult:
    model: SurrogateModel
    losses: list = field(default_factory=list)
    val_mae: float = float("nan")


def surrogate_pairs(data: np.ndarray, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Conditioning frames ``[M, C]`` and following frames ``[M, horizon, C]`` from ``[N, T, B, 4]``."""
    if data.shape[1] < horizon + 1:
        raise BaselineError(f"trajectories of {data.shape[1]} frames are too short for a "
                            f"{horizon}-step surrogate (need {horizon + 1})")
    w = extract_windows(data, horizon + 1)
    return w[:, 0], w[:, 1:]


def train_surrogate(variant: str, data: np.ndarray, config: SurrogateTrainConfig,
                    backbone: DenoiserConfig | None = None, out_dir=None,
                    progress: Callable | None = None) -> SurrogateTrainResult:
    """MSE-fit a surrogate on box-unit trajectories ``[N, T, B, 4]``.

    The last ``val_fraction`` of simulations is held out; the mean absolute
    rollout error over one horizon on it is logged at the end.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 4 or len(data) == 0:
        raise BaselineError(f"need a non-empty [N, T, B, 4] array, got {data.shape}")
    backbone = backbone or default_backbone(variant, data.shape[2])
    model = SurrogateModel(variant, backbone)
    if model.channels != data.shape[2] * 4:
        raise BaselineError(f"surrogate has {model.channels} channels, data has {data.shape[2] * 4}")
    n_val = int(len(data) * config.val_fraction) if len(data) > 1 else 0
    train_data, val_data = data[:len(data) - n_val], data[len(data) - n_val:]
    x, y = surrogate_pairs(train_data, model.horizon)
    x = model.scaler.to_model(x).astype(np.float32)
    y = model.scaler.to_model(y).astype(np.float32)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.net.parameters(), lr=config.lr)
    losses = []
    out = Path(out_dir) if out_dir else None
    fh = writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
    try:
        for step in range(1, config.total_steps + 1):
            idx = rng.integers(0, len(x), config.batch_size)
            loss = mse(model.predict(Tensor(x[idx])), Tensor(y[idx]))
            val = float(loss.data)
            if not np.isfinite(val):
                raise BaselineError(f"non-finite surrogate loss at step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(val)
            if step % config.log_every == 0 or step == config.total_steps:
                recent = float(np.mean(losses[-config.log_every:]))
                if writer:
                    writer.writerow([step, f"{recent:.6g}", config.lr])
                if progress:
                    progress(step, recent)
    finally:
        if fh:
            fh.close()
    val_mae = float("nan")
    if len(val_data):
        vx, vy = surrogate_pairs(val_data, model.horizon)
        pred = model.rollout(vx.reshape(len(vx), -1, 4), model.horizon + 1)[:, 1:]
        val_mae = float(np.mean(np.abs(pred.reshape(vy.shape) - vy)))
        log.info("%s surrogate validation rollout MAE %.5f", variant, val_mae)
    if out:
        model.save(out / "last.ckpt", {"steps": config.total_steps, "val_mae": val_mae})
    return SurrogateTrainResult(model, losses, val_mae)


# designers --------------------------------------------------------------------

def _score_fn(objective) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(objective, DesignObjective):
        return lambda traj: objective.value(traj[:, -1, :, :2])
    return objective


def clamp_gamma(gamma: np.ndarray, radius: float, v_max: float = 1.0) -> np.ndarray:
    out = np.array(gamma, dtype=np.float64)
    out[..., :2] = np.clip(out[..., :2], radius, 1.0 - radius)
    out[..., 2:4] = np.clip(out[..., 2:4], -v_max, v_max)
    return out


@dataclass
class CemConfig:
    population: int = 100
    elite_frac: float = 0.1
    iterations: int = 20
    init_std: float = 0.25
    var_floor: float = 1e-6
    radius: float = 0.1
    v_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_elite < 2:
            raise ValueError(f"population * elite_frac must be >= 2, got {self.population * self.elite_frac}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def n_elite(self) -> int:
        return int(round(self.population * self.elite_frac))


@dataclass
class CemResult:
    gamma: np.ndarray              # [B, 4] best-ever candidate
    best: list                     # best-ever objective after each iteration
    elite_mean: list               # mean elite objective per iteration
    elite_sets: list               # elite candidate indices per iteration


def cem_design(model, objective, config: CemConfig, T_total: int, n_bodies: int | None = None,
               rng: np.random.Generator | None = None) -> CemResult:
    """Cross-entropy search over one initial state with a diagonal Gaussian.

    ``model.rollout(gamma [n, B, 4], T_total)`` supplies box-unit trajectories;
    ``objective`` is a :class:`DesignObjective` or a callable on them returning ``[n]``.
    """
    score = _score_fn(objective)
    B = n_bodies or model.n_bodies
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    mean = np.tile([0.5, 0.5, 0.0, 0.0], B).astype(np.float64)
    std = np.full(mean.shape, config.init_std)
    best_val, best_x = np.inf, mean.copy()
    res = CemResult(None, [], [], [])
    for _ in range(config.iterations):
        cand = mean + std * rng.standard_normal((config.population, mean.size))
        cand = clamp_gamma(cand.reshape(-1, B, 4), config.radius, config.v_max)
        J = np.asarray(score(model.rollout(cand, T_total)), dtype=np.float64)
        order = np.argsort(J, kind="stable")
        elite = order[:config.n_elite]
        if J[order[0]] < best_val:
            best_val, best_x = float(J[order[0]]), cand[order[0]].copy()
        ex = cand[elite].reshape(len(elite), -1)
        mean = ex.mean(axis=0)
        std = np.sqrt(np.maximum(ex.var(axis=0), config.var_floor))
        res.best.append(best_val)
        res.elite_mean.append(float(J[elite].mean()))
        res.elite_sets.append(elite.copy())
    res.gamma = best_x.reshape(B, 4)
    return res


@dataclass
class BackpropConfig:
    steps: int = 300
    lr: float = 1e-2
    radius: float = 0.1
    v_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be non-negative")


@dataclass
class BackpropResult:
    gamma: np.ndarray      # [n, B, 4] best iterate per design
    trace: list            # mean surrogate objective per step
    final: np.ndarray      # [n] best surrogate objective per design


def rollout_objective_grad(model, gamma: np.ndarray, T_total: int,
                           objective: DesignObjective) -> tuple[np.ndarray, np.ndarray]:
    """Surrogate objective ``[n]`` and its gradient w.r.t. box-unit ``gamma [n, B, 4]``.

    The objective gradient on the rolled-out trajectory is pulled back through
    the rollout graph as the weights of a linear functional.
    """
    n = gamma.shape[0]
    sc = model.scaler
    x0 = Tensor(sc.to_model(gamma.reshape(n, -1)), requires_grad=True, dtype=np.float64)
    traj = model.rollout_tensor(x0, T_total)
    box = sc.to_box(traj.data.astype(np.float64)).reshape(n, T_total, -1)
    J, g = objective_and_grad(box, objective)
    g_model = sc.grad_to_model(g).astype(traj.data.dtype)
    backward(tsum(mul(traj, Tensor(g_model, dtype=traj.data.dtype))))
    grad_model = np.asarray(x0.grad, dtype=np.float64)
    scale = np.tile(np.asarray(sc.scale, dtype=np.float64), grad_model.shape[-1] // len(sc.scale))
    return J, (grad_model / scale).reshape(gamma.shape)


def backprop_design(model, objective: DesignObjective, config: BackpropConfig, T_total: int,
                    init: np.ndarray) -> BackpropResult:
    """Adam descent on initial states ``init [n, B, 4]`` through the surrogate rollout.

    States are clamped to the box after every step; the best iterate seen for
    each design (by surrogate objective) is returned.
    """
    gamma = clamp_gamma(init, config.radius, config.v_max)
    state = AdamState.for_params([gamma], lr=config.lr)
    best = np.full(gamma.shape[0], np.inf)
    best_gamma = gamma.copy()
    trace = []
    for step in range(config.steps + 1):
        J, g = rollout_objective_grad(model, gamma, T_total, objective)
        better = J < best
        best[better] = J[better]
        best_gamma[better] = gamma[better]
        trace.append(float(np.mean(J)))
        if step == config.steps:
            break
        if not np.all(np.isfinite(g)):
            raise BaselineError(f"non-finite gradient at backprop step {step}")
        (gamma,) = adam_step(state, [gamma], [g])
        gamma = clamp_gamma(gamma, config.radius, config.v_max)
    return BackpropResult(best_gamma, trace, best)


def n_segments(T_total: int, horizon: int) -> int:
    """Forward passes a chained rollout of ``T_total`` frames needs."""
    return math.ceil((T_total - 1) / horizon)
