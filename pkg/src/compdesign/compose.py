"""Compositional guided sampling over a global design variable.

The global variable ``z`` is a trajectory ``[T_total, n_bodies * 4]`` (channels
are ``(x, y, vx, vy)`` per body). A :class:`CompositionPlan` covers ``z`` with
entries, each selecting a ``[T_tr, channels_i]`` block (a time window crossed
with a body subset) that one trained model scores. Noise predictions of all
entries are scattered back and averaged per coordinate, then used in the usual
ancestral update with the design-objective gradient added as guidance. By
default that gradient is taken on the clean-sample estimate and pulled back
through the composed noise prediction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .diffusion import GUIDE_ON, DiffusionSchedule, SamplingError, ddpm_transition, guided_noise, respace

N_FEATURES = 4


class PlanError(ValueError):
    pass


def time_windows(T_total: int, T_tr: int, t_q: int) -> list[int]:
    """Start offsets of overlapping windows of length ``T_tr`` at stride ``t_q`` covering ``T_total``."""
    if T_tr < 1 or t_q < 1:
        raise PlanError("window length and stride must be positive")
    if T_total < T_tr:
        raise PlanError(f"horizon {T_total} is shorter than the window {T_tr}")
    residue = (T_total - T_tr) % t_q
    if residue:
        raise PlanError(f"(T_total - T_tr) = {T_total - T_tr} is not a multiple of stride {t_q} "
                        f"(residue {residue})")
    return list(range(0, T_total - T_tr + 1, t_q))


def body_pairs(n_bodies: int) -> list[tuple[int, int]]:
    if n_bodies < 2:
        raise PlanError(f"need at least 2 bodies for pairs, got {n_bodies}")
    return list(combinations(range(n_bodies), 2))


def body_channels(bodies: Sequence[int]) -> np.ndarray:
    return np.array([N_FEATURES * b + f for b in bodies for f in range(N_FEATURES)], dtype=np.intp)


@dataclass(frozen=True)
class PlanEntry:
    model_id: str
    times: np.ndarray      # [T_i] global frame indices
    channels: np.ndarray   # [C_i] global channel indices
    label: str = ""

    def __post_init__(self):
        for name in ("times", "channels"):
            arr = np.asarray(getattr(self, name), dtype=np.intp)
            if len(np.unique(arr)) != len(arr):
                raise PlanError(f"entry {self.label or self.model_id}: {name} index map is not injective")
            object.__setattr__(self, name, arr)

    def take(self, z: np.ndarray) -> np.ndarray:
        return z[:, self.times[:, None], self.channels[None, :]]


@dataclass
class CompositionPlan:
    T_total: int
    n_channels: int
    entries: list[PlanEntry]
    coverage: np.ndarray = field(init=False)

    def __post_init__(self):
        cov = np.zeros((self.T_total, self.n_channels), dtype=np.int64)
        for e in self.entries:
            if e.times.min() < 0 or e.times.max() >= self.T_total or \
                    e.channels.min() < 0 or e.channels.max() >= self.n_channels:
                raise PlanError(f"entry {e.label or e.model_id} indexes outside the design variable")
            cov[e.times[:, None], e.channels[None, :]] += 1
        self.coverage = cov

    @property
    def n_bodies(self) -> int:
        return self.n_channels // N_FEATURES

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self) -> None:
        gaps = np.argwhere(self.coverage < 1)
        if len(gaps):
            shown = ", ".join(f"(t={t}, c={c})" for t, c in gaps[:10])
            more = f" and {len(gaps) - 10} more" if len(gaps) > 10 else ""
            raise PlanError(f"plan leaves {len(gaps)} coordinates uncovered: {shown}{more}")

    def describe(self) -> dict:
        return {"T_total": self.T_total, "n_channels": self.n_channels, "n_entries": len(self.entries),
                "entries": [e.label for e in self.entries]}


def build_plan(n_bodies: int, T_total: int, T_tr: int, t_q: int,
               model_registry: Mapping[str, object], model_id: str | None = None) -> CompositionPlan:
    """Cross product of time windows and body subsets sized to the registered model.

    With a 2-body model this gives one entry per (window, pair).
    """
    if not model_registry:
        raise PlanError("model registry is empty")
    model_id = model_id or next(iter(model_registry))
    model = model_registry[model_id]
    k = model.channels // N_FEATURES
    if model.window_len != T_tr:
        raise PlanError(f"model {model_id!r} has window {model.window_len}, plan asks for {T_tr}")
    if n_bodies < k:
        raise PlanError(f"{n_bodies} bodies cannot host a {k}-body model")
    groups = list(combinations(range(n_bodies), k))
    entries = []
    for off in time_windows(T_total, T_tr, t_q):
        times = np.arange(off, off + T_tr)
        for g in groups:
            entries.append(PlanEntry(model_id, times, body_channels(g), f"t{off}:b{'-'.join(map(str, g))}"))
    plan = CompositionPlan(T_total, n_bodies * N_FEATURES, entries)
    plan.validate()
    return plan


def shared_plan(T_total: int, n_channels: int, model_ids: Sequence[str],
                times=None, channels=None) -> CompositionPlan:
    """Several models scoring the same coordinates (part-to-whole composition)."""
    times = np.arange(T_total) if times is None else np.asarray(times)
    channels = np.arange(n_channels) if channels is None else np.asarray(channels)
    entries = [PlanEntry(m, times, channels, f"shared:{m}") for m in model_ids]
    plan = CompositionPlan(T_total, n_channels, entries)
    plan.validate()
    return plan


# objective --------------------------------------------------------------------

@dataclass(frozen=True)
class DesignObjective:
    """Mean over bodies of the final-frame Euclidean distance to ``target`` (box units)."""

    target: tuple[float, float] = (0.5, 0.5)
    kind: str = "final_distance"
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind != "final_distance":
            raise ValueError(f"unsupported objective kind {self.kind!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unsupported reduction {self.reduction!r}")
        if not all(0.0 <= t <= 1.0 for t in self.target):
            raise ValueError(f"target {self.target} outside the unit box")

    def value(self, final_positions: np.ndarray) -> np.ndarray:
        """``final_positions``: ``[..., B, 2]`` -> ``[...]``."""
        d = np.linalg.norm(np.asarray(final_positions) - np.asarray(self.target), axis=-1)
        return d.mean(axis=-1) if self.reduction == "mean" else d.sum(axis=-1)


def objective_and_grad(z: np.ndarray, objective: DesignObjective) -> tuple[np.ndarray, np.ndarray]:
    """Objective and gradient for box-unit trajectories ``[..., T, B*4]``.

    Returns ``(J [...], grad like z)``; only final-frame positions get gradient,
    and a body sitting exactly on the target contributes zero.
    """
    z = np.asarray(z, dtype=np.float64)
    lead = z.shape[:-2]
    B = z.shape[-1] // N_FEATURES
    final = z[..., -1, :].reshape(*lead, B, N_FEATURES)[..., :2]
    diff = final - np.asarray(objective.target)
    dist = np.linalg.norm(diff, axis=-1)
    J = dist.mean(axis=-1) if objective.reduction == "mean" else dist.sum(axis=-1)
    w = 1.0 / B if objective.reduction == "mean" else 1.0
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
    grad = np.zeros_like(z)
    g_final = np.zeros((*lead, B, N_FEATURES))
    g_final[..., :2] = w * unit
    grad[..., -1, :] = g_final.reshape(*lead, B * N_FEATURES)
    return J, grad


# composed noise prediction ----------------------------------------------------

def _grouped(plan: CompositionPlan, model_registry: Mapping[str, object]):
    by_model: dict[str, list[PlanEntry]] = {}
    for e in plan.entries:
        by_model.setdefault(e.model_id, []).append(e)
    for mid, entries in by_model.items():
        model = model_registry[mid]
        for e in entries:
            if len(e.channels) != model.channels or len(e.times) != model.window_len:
                raise PlanError(f"entry {e.label} selects [{len(e.times)}, {len(e.channels)}] but "
                                f"model {mid!r} takes [{model.window_len}, {model.channels}]")
        yield model, entries


def _norm(plan: CompositionPlan, coverage_normalize: bool):
    return plan.coverage if coverage_normalize else len(plan.entries)


def composed_eps(z: np.ndarray, s: int, plan: CompositionPlan, model_registry: Mapping[str, object],
                 coverage_normalize: bool = True) -> np.ndarray:
    """Average of every entry's noise prediction, scattered onto the global ``z`` (model space).

    Entries sharing a model are evaluated in one batched call.
    """
    n = z.shape[0]
    acc = np.zeros(z.shape, dtype=np.float64)
    for model, entries in _grouped(plan, model_registry):
        out = model(np.concatenate([e.take(z) for e in entries], axis=0), s)
        for i, e in enumerate(entries):
            acc[:, e.times[:, None], e.channels[None, :]] += out[i * n:(i + 1) * n]
    return acc / _norm(plan, coverage_normalize)


def composed_eps_with_pullback(z: np.ndarray, s: int, plan: CompositionPlan,
                               model_registry: Mapping[str, object], coverage_normalize: bool = True):
    """:func:`composed_eps` plus ``v -> J^T v`` for the composed prediction's Jacobian."""
    n = z.shape[0]
    norm = _norm(plan, coverage_normalize)
    acc = np.zeros(z.shape, dtype=np.float64)
    groups = []
    for model, entries in _grouped(plan, model_registry):
        if not hasattr(model, "eps_with_pullback"):
            raise PlanError(f"model {entries[0].model_id!r} has no pullback for guidance on the clean estimate")
        out, pb = model.eps_with_pullback(np.concatenate([e.take(z) for e in entries], axis=0), s)
        for i, e in enumerate(entries):
            acc[:, e.times[:, None], e.channels[None, :]] += out[i * n:(i + 1) * n]
        groups.append((entries, pb))

    def pullback(v: np.ndarray) -> np.ndarray:
        w = v / norm
        grad = np.zeros(z.shape, dtype=np.float64)
        for entries, pb in groups:
            g = pb(np.concatenate([e.take(w) for e in entries], axis=0))
            for i, e in enumerate(entries):
                grad[:, e.times[:, None], e.channels[None, :]] += g[i * n:(i + 1) * n]
        return grad
    return acc / norm, pullback


# design loop ------------------------------------------------------------------

@dataclass
class SamplerConfig:
    S: int | None = None            # None: the models' training schedule
    K: int = 1
    lam: float = 0.4
    eta: float = 1.0
    inner_eta: float = 1.0
    coverage_normalize: bool = True
    guidance_space: str = "sample"
    guide_on: str = "estimate"
    clip_x0: float | None = None   # e.g. diffusion.X0_CLIP; None keeps the plain ancestral update
    seed: int = 0

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.guide_on not in GUIDE_ON:
            raise ValueError(f"guide_on must be one of {GUIDE_ON}, got {self.guide_on!r}")


@dataclass
class DesignResult:
    gamma: np.ndarray        # [n, B, 4] box units
    trajectory: np.ndarray   # [n, T_total, B, 4] box units
    z0: np.ndarray           # model space, [n, T_total, B*4]


def _shared_attr(models, name):
    vals = [getattr(m, name) for m in models]
    first = vals[0]
    for v in vals[1:]:
        if v != first:
            raise PlanError(f"models disagree on {name}")
    return first


def sampling_schedule(models, S: int | None) -> DiffusionSchedule:
    base = models[0].schedule
    for m in models[1:]:
        if m.schedule.S != base.S:
            raise PlanError("models were trained with different diffusion step counts")
    if S is None or S == base.S:
        return base
    return respace(base, S)


def design(plan: CompositionPlan, objective: DesignObjective, config: SamplerConfig,
           model_registry: Mapping[str, object], n: int = 1,
           rng: np.random.Generator | None = None) -> DesignResult:
    """Guided compositional sampling of ``n`` designs.

    For every level ``s = S..1``: ``K`` fixed-level updates
    ``z <- z - inner_eta * beta_s * eps~ + sigma_s * xi``, then one ancestral
    transition to ``s - 1``. ``eps~`` is the composed noise prediction plus the
    guidance term.
    """
    plan.validate()
    models = [model_registry[e.model_id] for e in plan.entries]
    scaler = _shared_attr(models, "scaler")
    schedule = sampling_schedule(models, config.S)
    rng = rng if rng is not None else np.random.default_rng(config.seed)

    def guidance(zm):
        _, g = objective_and_grad(scaler.to_box(zm), objective)
        return scaler.grad_to_model(g)

    def predict(zm, step):
        return composed_eps(zm, step, plan, model_registry, config.coverage_normalize)

    def predict_with_pullback(zm, step):
        return composed_eps_with_pullback(zm, step, plan, model_registry, config.coverage_normalize)

    def eps_tilde(zm, s):
        return guided_noise(zm, s, schedule, predict, predict_with_pullback, guidance, config.lam,
                            config.guidance_space, config.guide_on)

    z = rng.standard_normal((n, plan.T_total, plan.n_channels))
    for s in range(schedule.S, 0, -1):
        for k in range(config.K):
            step = config.inner_eta * schedule.beta[s]
            z = z - step * eps_tilde(z, s) + schedule.sigma[s] * rng.standard_normal(z.shape)
            if not np.all(np.isfinite(z)):
                raise SamplingError(f"non-finite design state at s={s}, k={k}")
        z = ddpm_transition(z, eps_tilde(z, s), s, schedule, rng, config.eta, config.clip_x0)
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite design state at s={s}, transition")
    traj = scaler.to_box(z).reshape(n, plan.T_total, plan.n_bodies, N_FEATURES)
    return DesignResult(traj[:, 0].copy(), traj, z)
