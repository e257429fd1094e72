"""Versioned binary checkpoints.

Layout (little endian)::

    b"CDCKPT"  u32 version
    u32 len, metadata JSON
    4 sections in order: params, adam_m, adam_v, ema
      u32 count, then per entry:
        u16 len, name (utf-8); u8 dtype code (4=f32, 8=f64); u8 ndim; u32 dims[ndim]; data

Adam step/lr/betas are stored in the metadata under ``"adam"``.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"CDCKPT"
VERSION = 1
_DTYPES = {4: "<f4", 8: "<f8"}
SECTIONS = ("params", "adam_m", "adam_v", "ema")


def _write_section(fh, entries: dict) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = 8 if arr.dtype == np.float64 else 4
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_section(fh) -> "OrderedDict[str, np.ndarray]":
    (count,) = struct.unpack("<I", fh.read(4))
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode()
        code, ndim = struct.unpack("<BB", fh.read(2))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(fh.read(code * size), dtype=_DTYPES[code]).reshape(shape)
        out[name] = data.astype(data.dtype.newbyteorder("="))
    return out


def save_checkpoint(path, params: dict, meta: dict | None = None,
                    adam: AdamState | None = None, ema: dict | None = None) -> None:
    meta = dict(meta or {})
    names = list(params)
    m = v = {}
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                        "eps": adam.eps, "step": adam.step}
        m = dict(zip(names, adam.m))
        v = dict(zip(names, adam.v))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for section in (params, m, v, ema or {}):
            _write_section(fh, section)


def load_checkpoint(path) -> dict:
    """Return ``{"meta", "params", "ema", "adam"}``; ``adam`` is an :class:`AdamState` or None."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n).decode())
        sections = {name: _read_section(fh) for name in SECTIONS}
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        names = list(sections["params"])
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                         m=[sections["adam_m"][k] for k in names],
                         v=[sections["adam_v"][k] for k in names])
    return {"meta": meta, "params": sections["params"], "ema": sections["ema"] or None, "adam": adam}
