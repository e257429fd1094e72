"""Design output files.

Layout (little endian)::

    b"CINDMD"  u32 version
    u32 len, header JSON (method, n, n_bodies, T_total, has_trajectory, seed, plan, config)
    f32 gamma [n][body][feature]
    f32 trajectory [n][t][body][feature]   (only if has_trajectory)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CINDMD"
VERSION = 1


@dataclass
class DesignFile:
    header: dict
    gamma: np.ndarray                 # [n, B, 4]
    trajectory: np.ndarray | None     # [n, T, B, 4]

    @property
    def method(self) -> str:
        return self.header["method"]


def write_design(path, method: str, gamma: np.ndarray, trajectory: np.ndarray | None = None,
                 seed: int = 0, plan: dict | None = None, config: dict | None = None) -> Path:
    gamma = np.asarray(gamma)
    if gamma.ndim != 3 or gamma.shape[2] != 4:
        raise ValueError(f"gamma must be [n, B, 4], got {gamma.shape}")
    n, B = gamma.shape[:2]
    T = None
    if trajectory is not None:
        trajectory = np.asarray(trajectory)
        if trajectory.shape[0] != n or trajectory.shape[2:] != (B, 4):
            raise ValueError(f"trajectory {trajectory.shape} does not match gamma {gamma.shape}")
        T = trajectory.shape[1]
    header = {"method": method, "n": n, "n_bodies": B, "T_total": T, "has_trajectory": trajectory is not None,
              "seed": seed, "plan": plan or {}, "config": config or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(gamma, dtype="<f4").tobytes())
        if trajectory is not None:
            fh.write(np.ascontiguousarray(trajectory, dtype="<f4").tobytes())
    return path


def read_design(path) -> DesignFile:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a design file")
        version, n_blob = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported design file version {version}")
        header = json.loads(fh.read(n_blob).decode())
        n, B = header["n"], header["n_bodies"]
        gamma = np.frombuffer(fh.read(4 * n * B * 4), dtype="<f4").reshape(n, B, 4).astype(np.float64)
        traj = None
        if header["has_trajectory"]:
            T = header["T_total"]
            traj = np.frombuffer(fh.read(4 * n * T * B * 4), dtype="<f4").reshape(n, T, B, 4).astype(np.float64)
    return DesignFile(header, gamma, traj)
