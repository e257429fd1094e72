"""Trajectory dataset generation and the binary dataset file format.

File layout (little endian)::

    b"CINDM1"                    magic
    u32 version
    u32 n_sims, u32 T, u32 B, u32 F (=4)
    f64 dt_record
    i64 seed
    32 bytes sha256 digest of the canonical config JSON
    u32 len, config JSON (utf-8)
    f32 data in [sim][t][body][feature] order
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .physics import SimConfig, check_frames, sample_initial_state, simulate_batch

MAGIC = b"CINDM1"
VERSION = 1
N_FEATURES = 4
# box side in the original pixel coordinates
PIXEL_BOX = 200.0

_HEAD = struct.Struct("<IIIIIdq32s")


def pixels_to_box(raw):
    """Convert pixel-space positions/velocities (200 px box) to box units."""
    return np.asarray(raw, dtype=np.float64) / PIXEL_BOX


def config_digest(config: SimConfig) -> bytes:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


@dataclass
class DatasetHeader:
    n_sims: int
    n_frames: int
    n_bodies: int
    dt_record: float
    seed: int
    digest: bytes
    config: dict
    version: int = VERSION
    n_features: int = N_FEATURES


@dataclass
class DatasetSummary:
    path: Path
    header: DatasetHeader
    shape: tuple[int, ...]


def sim_rng(seed: int, index: int) -> np.random.Generator:
    """Per-simulation stream, independent of how simulations are scheduled."""
    return np.random.default_rng([int(seed), int(index)])


def generate_trajectories(config: SimConfig, n_sims: int) -> np.ndarray:
    """Run ``n_sims`` random simulations -> float64 ``[n_sims, T, B, 4]``."""
    T = config.n_frames
    if n_sims == 0:
        return np.zeros((0, T, config.n_bodies, N_FEATURES))
    init = np.stack([sample_initial_state(config, sim_rng(config.seed, i)) for i in range(n_sims)])
    data = simulate_batch(init, T, config)
    check_frames(data, config.radius)
    return data


def write_dataset(path, data: np.ndarray, config: SimConfig) -> DatasetHeader:
    data = np.asarray(data)
    if data.ndim != 4 or data.shape[-1] != N_FEATURES:
        raise ValueError(f"dataset must be [n_sims, T, B, 4], got {data.shape}")
    n_sims, T, B, F = data.shape
    cfg_json = json.dumps(config.to_dict(), sort_keys=True).encode()
    header = DatasetHeader(n_sims, T, B, config.dt_record, config.seed, config_digest(config),
                           config.to_dict())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEAD.pack(VERSION, n_sims, T, B, F, header.dt_record, header.seed, header.digest))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return header


def read_header(fh) -> DatasetHeader:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"not a dataset file (magic {magic!r})")
    version, n_sims, T, B, F, dt_record, seed, digest = _HEAD.unpack(fh.read(_HEAD.size))
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    (n,) = struct.unpack("<I", fh.read(4))
    cfg = json.loads(fh.read(n).decode())
    return DatasetHeader(n_sims, T, B, dt_record, seed, digest, cfg, version, F)


def read_dataset(path) -> tuple[DatasetHeader, np.ndarray]:
    """Load a dataset file -> (header, float32 ``[n_sims, T, B, 4]``)."""
    with open(path, "rb") as fh:
        header = read_header(fh)
        shape = (header.n_sims, header.n_frames, header.n_bodies, header.n_features)
        count = int(np.prod(shape))
        data = np.frombuffer(fh.read(4 * count), dtype="<f4")
    if data.size != count:
        raise ValueError(f"truncated dataset: expected {count} floats, got {data.size}")
    return header, data.reshape(shape).astype(np.float32)


def generate_dataset(config: SimConfig, n_sims: int, out) -> DatasetSummary:
    """Simulate ``n_sims`` trajectories with ``config`` and write them to ``out``."""
    data = generate_trajectories(config, n_sims)
    header = write_dataset(out, data, config)
    return DatasetSummary(Path(out), header, data.shape)
