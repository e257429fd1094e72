"""Ground-truth solver for equal-mass elastic balls bouncing in the unit box.

All quantities are in box units (the 200 px box side is 1). A state array has
shape ``[B, 4]`` with features ``(x, y, vx, vy)``; velocities are box units per
second.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._backend import get_kernel

OVERLAP_TOL = 1e-9
FRAME_TOL = 1e-6
MAX_PLACEMENT_TRIES = 10_000


class InvalidStateError(ValueError):
    """Raised for non-finite, out-of-box or overlapping ball states."""


class PackingError(ValueError):
    """Raised when non-overlapping initial placement fails."""


@dataclass(frozen=True)
class BallState:
    position: tuple[float, float]
    velocity: tuple[float, float]

    def as_row(self) -> list[float]:
        return [*self.position, *self.velocity]

    @classmethod
    def from_row(cls, row) -> "BallState":
        return cls((float(row[0]), float(row[1])), (float(row[2]), float(row[3])))


@dataclass(frozen=True)
class SimConfig:
    n_bodies: int = 2
    radius: float = 0.1
    dt_sim: float = 1.0 / 60.0
    record_stride: int = 4
    n_steps_sim: int = 1000
    velocity_range: tuple[float, float] = (-0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.n_bodies < 1:
            raise ValueError(f"n_bodies must be >= 1, got {self.n_bodies}")
        if self.record_stride < 1 or self.n_steps_sim < 0 or self.dt_sim <= 0:
            raise ValueError("record_stride >= 1, n_steps_sim >= 0 and dt_sim > 0 required")
        lo, hi = self.velocity_range
        if lo > hi:
            raise ValueError(f"empty velocity_range {self.velocity_range}")
        # square packing bound; rejection sampling still decides the marginal cases
        per_side = int(np.floor(1.0 / (2 * self.radius)))
        if 2 * self.radius > 1.0 or self.n_bodies > per_side * per_side:
            raise PackingError(
                f"{self.n_bodies} balls of radius {self.radius} cannot fit in the unit box"
            )

    @property
    def dt_record(self) -> float:
        return self.record_stride * self.dt_sim

    @property
    def n_frames(self) -> int:
        return self.n_steps_sim // self.record_stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["velocity_range"] = list(self.velocity_range)
        return d


@dataclass
class Trajectory:
    data: np.ndarray  # [T, B, 4]
    dt_record: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[-1] != 4 or self.data.shape[0] < 1:
            raise ValueError(f"trajectory must be [T>=1, B, 4], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidStateError("trajectory contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bodies(self) -> int:
        return self.data.shape[1]


def as_state_array(states) -> np.ndarray:
    """Coerce a ``[B, 4]`` array or a sequence of :class:`BallState` to float64."""
    if len(states) and isinstance(states[0], BallState):
        states = [s.as_row() for s in states]
    arr = np.array(states, dtype=np.float64).reshape(-1, 4)
    return arr


def check_finite(state: np.ndarray) -> None:
    if not np.all(np.isfinite(state)):
        raise InvalidStateError("state contains non-finite values")


def pair_gaps(positions: np.ndarray, radius: float) -> np.ndarray:
    """Centre distance minus ``2*radius`` for every unordered pair (``[P]``)."""
    n = positions.shape[0]
    if n < 2:
        return np.empty(0)
    i, j = np.triu_indices(n, k=1)
    d = np.linalg.norm(positions[j] - positions[i], axis=-1)
    return d - 2 * radius


def validate_state(state: np.ndarray, radius: float, tol: float = OVERLAP_TOL) -> None:
    """Raise :class:`InvalidStateError` unless ``state`` is finite, in the box and non-overlapping."""
    check_finite(state)
    pos = state[:, :2]
    if np.any(pos < radius - tol) or np.any(pos > 1 - radius + tol):
        raise InvalidStateError("ball centre outside [radius, 1 - radius]")
    gaps = pair_gaps(pos, radius)
    if gaps.size and gaps.min() < -tol:
        raise InvalidStateError(f"balls overlap by {-gaps.min():.3g}")


def step(states, dt: float, radius: float = 0.1):
    """Advance balls by one substep of length ``dt``.

    Accepts a ``[B, 4]`` array or a list of :class:`BallState` and returns the
    same kind. Wall contacts are mirrored about the contact line with the
    normal velocity reflected; pair contacts swap normal velocity components
    (equal masses) and mirror the penetration.
    """
    as_objects = len(states) > 0 and isinstance(states[0], BallState)
    arr = as_state_array(states)
    check_finite(arr)
    gaps = pair_gaps(arr[:, :2], radius)
    if gaps.size and gaps.min() < -OVERLAP_TOL:
        raise InvalidStateError(f"balls overlap by {-gaps.min():.3g} before the step")
    get_kernel().advance(arr, 1, float(dt), float(radius))
    if as_objects:
        return [BallState.from_row(r) for r in arr]
    return arr


def simulate_batch(initial: np.ndarray, n_frames: int, config: SimConfig,
                   backend: str | None = None) -> np.ndarray:
    """Solver rollouts for ``[N, B, 4]`` initial states -> ``[N, n_frames, B, 4]``.

    No validation; callers are expected to pass feasible states.
    """
    initial = np.ascontiguousarray(initial, dtype=np.float64)
    return get_kernel(backend).simulate(
        initial, int(n_frames), int(config.record_stride), float(config.dt_sim), float(config.radius)
    )


def rollout(initial, config: SimConfig, n_frames: int | None = None,
            backend: str | None = None) -> Trajectory:
    """Solver rollout recorded every ``record_stride`` substeps.

    ``n_frames`` defaults to ``n_steps_sim // record_stride``; frame 0 is ``initial``.
    """
    arr = as_state_array(initial)
    if arr.shape[0] != config.n_bodies:
        raise InvalidStateError(f"expected {config.n_bodies} balls, got {arr.shape[0]}")
    validate_state(arr, config.radius)
    if n_frames is None:
        n_frames = config.n_frames
    data = simulate_batch(arr[None], max(int(n_frames), 1), config, backend)[0]
    return Trajectory(data, config.dt_record)


def sample_initial_state(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample non-overlapping positions and uniform velocities (``[B, 4]``)."""
    r = config.radius
    pos = np.empty((config.n_bodies, 2))
    placed = 0
    tries = 0
    while placed < config.n_bodies:
        if tries >= MAX_PLACEMENT_TRIES:
            raise PackingError(
                f"could not place {config.n_bodies} balls after {MAX_PLACEMENT_TRIES} tries"
            )
        tries += 1
        cand = rng.uniform(r, 1 - r, size=2)
        if placed and np.min(np.linalg.norm(pos[:placed] - cand, axis=1)) < 2 * r:
            continue
        pos[placed] = cand
        placed += 1
    lo, hi = config.velocity_range
    vel = rng.uniform(lo, hi, size=(config.n_bodies, 2))
    return np.concatenate([pos, vel], axis=1)


def kinetic_energy(state: np.ndarray) -> float:
    v = np.asarray(state)[..., 2:4]
    return 0.5 * float(np.sum(v * v))


def momentum(state: np.ndarray) -> np.ndarray:
    return np.asarray(state)[..., 2:4].sum(axis=-2)


def check_frames(data: np.ndarray, radius: float, tol: float = FRAME_TOL) -> None:
    """Raise if any recorded frame has a centre outside the box or an overlapping pair."""
    pos = np.asarray(data)[..., :2]
    if np.any(pos < radius - tol) or np.any(pos > 1 - radius + tol):
        raise InvalidStateError("recorded frame has a ball outside the box")
    n = pos.shape[-2]
    if n > 1:
        i, j = np.triu_indices(n, k=1)
        d = np.linalg.norm(pos[..., j, :] - pos[..., i, :], axis=-1)
        if d.min() < 2 * radius - tol:
            raise InvalidStateError(f"recorded frame has overlap {2 * radius - d.min():.3g}")


def project_feasible(state: np.ndarray, radius: float, max_iters: int = 1000,
                     tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Push balls into the box and apart with small symmetric moves.

    Returns ``(projected, displacement)`` where ``displacement`` is the total
    Euclidean distance the centres moved. Raises :class:`PackingError` if
    overlaps persist after ``max_iters`` sweeps.
    """
    out = np.array(state, dtype=np.float64).reshape(-1, 4)
    check_finite(out)
    orig = out[:, :2].copy()
    lo, hi = radius, 1 - radius
    n = out.shape[0]
    out[:, :2] = np.clip(out[:, :2], lo, hi)
    for _ in range(max_iters):
        moved = False
        for i in range(n):
            for j in range(i + 1, n):
                d = out[j, :2] - out[i, :2]
                dist = float(np.hypot(d[0], d[1]))
                if dist >= 2 * radius - tol:
                    continue
                if dist < 1e-12:
                    # coincident centres: split along a fixed pair-dependent direction
                    ang = 2 * np.pi * ((i * 7 + j * 13) % 17) / 17
                    nrm = np.array([np.cos(ang), np.sin(ang)])
                else:
                    nrm = d / dist
                # a hair past contact so the tolerance check terminates
                half = 0.5 * (2 * radius - dist) + 0.5 * tol
                out[i, :2] -= half * nrm
                out[j, :2] += half * nrm
                moved = True
        out[:, :2] = np.clip(out[:, :2], lo, hi)
        if not moved:
            break
    else:
        raise PackingError("could not separate overlapping balls")
    gaps = pair_gaps(out[:, :2], radius)
    if gaps.size and gaps.min() < -OVERLAP_TOL:
        raise PackingError("could not separate overlapping balls")
    disp = float(np.linalg.norm(out[:, :2] - orig, axis=1).sum())
    return out, disp
