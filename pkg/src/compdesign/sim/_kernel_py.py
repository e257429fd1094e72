"""Pure-Python substep kernel for equal-mass elastic balls in the unit box.

This is the reference fallback for ``_kernel_c.pyx``; the two files perform the
same floating point operations in the same order so their outputs agree bitwise.
"""
from math import sqrt

import numpy as np

CLEANUP_PASSES = 8


def _substep(x, y, vx, vy, n, dt, radius):
    lo = radius
    hi = 1.0 - radius
    diam = 2.0 * radius
    diam2 = diam * diam

    for i in range(n):
        x[i] = x[i] + vx[i] * dt
        y[i] = y[i] + vy[i] * dt

    # pairwise contacts, fixed (i, j) order
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[j] - x[i]
            dy = y[j] - y[i]
            d2 = dx * dx + dy * dy
            if d2 >= diam2:
                continue
            dist = sqrt(d2)
            if dist < 1e-12:
                nx = 1.0
                ny = 0.0
            else:
                nx = dx / dist
                ny = dy / dist
            rel = (vx[j] - vx[i]) * nx + (vy[j] - vy[i]) * ny
            if rel < 0.0:
                vx[i] = vx[i] + rel * nx
                vy[i] = vy[i] + rel * ny
                vx[j] = vx[j] - rel * nx
                vy[j] = vy[j] - rel * ny
                pen = diam - dist
                x[i] = x[i] - pen * nx
                y[i] = y[i] - pen * ny
                x[j] = x[j] + pen * nx
                y[j] = y[j] + pen * ny

    for i in range(n):
        _wall(x, vx, i, lo, hi)
        _wall(y, vy, i, lo, hi)

    # residual overlaps (ball squeezed against a wall): minimal positional split
    for _ in range(CLEANUP_PASSES):
        moved = False
        for i in range(n):
            for j in range(i + 1, n):
                dx = x[j] - x[i]
                dy = y[j] - y[i]
                d2 = dx * dx + dy * dy
                if d2 >= diam2:
                    continue
                dist = sqrt(d2)
                if diam - dist <= 1e-12:
                    continue
                if dist < 1e-12:
                    nx = 1.0
                    ny = 0.0
                else:
                    nx = dx / dist
                    ny = dy / dist
                half = 0.5 * (diam - dist)
                x[i] = x[i] - half * nx
                y[i] = y[i] - half * ny
                x[j] = x[j] + half * nx
                y[j] = y[j] + half * ny
                moved = True
        if not moved:
            break
        for i in range(n):
            _clamp(x, vx, i, lo, hi)
            _clamp(y, vy, i, lo, hi)


def _wall(p, v, i, lo, hi):
    if p[i] < lo:
        if v[i] < 0.0:
            p[i] = 2.0 * lo - p[i]
            v[i] = -v[i]
        if p[i] < lo:
            p[i] = lo
        elif p[i] > hi:
            p[i] = hi
    elif p[i] > hi:
        if v[i] > 0.0:
            p[i] = 2.0 * hi - p[i]
            v[i] = -v[i]
        if p[i] > hi:
            p[i] = hi
        elif p[i] < lo:
            p[i] = lo


def _clamp(p, v, i, lo, hi):
    if p[i] < lo:
        p[i] = lo
        if v[i] < 0.0:
            v[i] = -v[i]
    elif p[i] > hi:
        p[i] = hi
        if v[i] > 0.0:
            v[i] = -v[i]


def advance(state, n_substeps, dt, radius):
    """Advance a single ``[B, 4]`` float64 state in place by ``n_substeps``."""
    n = state.shape[0]
    x = [float(v) for v in state[:, 0]]
    y = [float(v) for v in state[:, 1]]
    vx = [float(v) for v in state[:, 2]]
    vy = [float(v) for v in state[:, 3]]
    for _ in range(n_substeps):
        _substep(x, y, vx, vy, n, dt, radius)
    state[:, 0] = x
    state[:, 1] = y
    state[:, 2] = vx
    state[:, 3] = vy


def simulate(initial, n_frames, stride, dt, radius):
    """Roll ``[N, B, 4]`` initial states forward, recording every ``stride`` substeps.

    Returns an ``[N, n_frames, B, 4]`` float64 array whose first frame is the initial state.
    """
    initial = np.ascontiguousarray(initial, dtype=np.float64)
    n_sims, n_bodies, _ = initial.shape
    out = np.empty((n_sims, n_frames, n_bodies, 4), dtype=np.float64)
    for k in range(n_sims):
        n = n_bodies
        x = [float(v) for v in initial[k, :, 0]]
        y = [float(v) for v in initial[k, :, 1]]
        vx = [float(v) for v in initial[k, :, 2]]
        vy = [float(v) for v in initial[k, :, 3]]
        for t in range(n_frames):
            if t > 0:
                for _ in range(stride):
                    _substep(x, y, vx, vy, n, dt, radius)
            out[k, t, :, 0] = x
            out[k, t, :, 1] = y
            out[k, t, :, 2] = vx
            out[k, t, :, 3] = vy
    return out
