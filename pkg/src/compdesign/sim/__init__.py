"""Elastic-ball ground-truth solver and trajectory datasets."""
from ._backend import BACKEND
from .dataset import (
    DatasetHeader,
    DatasetSummary,
    generate_dataset,
    generate_trajectories,
    pixels_to_box,
    read_dataset,
    write_dataset,
)
from .physics import (
    BallState,
    InvalidStateError,
    PackingError,
    SimConfig,
    Trajectory,
    check_frames,
    kinetic_energy,
    momentum,
    project_feasible,
    rollout,
    sample_initial_state,
    simulate_batch,
    step,
    validate_state,
)

__all__ = [
    "BACKEND",
    "BallState",
    "DatasetHeader",
    "DatasetSummary",
    "InvalidStateError",
    "PackingError",
    "SimConfig",
    "Trajectory",
    "check_frames",
    "generate_dataset",
    "generate_trajectories",
    "kinetic_energy",
    "momentum",
    "pixels_to_box",
    "project_feasible",
    "read_dataset",
    "rollout",
    "sample_initial_state",
    "simulate_batch",
    "step",
    "validate_state",
    "write_dataset",
]
