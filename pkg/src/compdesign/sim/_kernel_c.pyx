# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled substep kernel; mirrors ``_kernel_py`` operation for operation."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

DEF CLEANUP_PASSES = 8


cdef inline void _wall(double* p, double* v, Py_ssize_t i, double lo, double hi) noexcept nogil:
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


cdef inline void _clamp(double* p, double* v, Py_ssize_t i, double lo, double hi) noexcept nogil:
    if p[i] < lo:
        p[i] = lo
        if v[i] < 0.0:
            v[i] = -v[i]
    elif p[i] > hi:
        p[i] = hi
        if v[i] > 0.0:
            v[i] = -v[i]


cdef void _substep(double* x, double* y, double* vx, double* vy, Py_ssize_t n,
                   double dt, double radius) noexcept nogil:
    cdef double lo = radius
    cdef double hi = 1.0 - radius
    cdef double diam = 2.0 * radius
    cdef double diam2 = diam * diam
    cdef double dx, dy, d2, dist, nx, ny, rel, pen, half
    cdef Py_ssize_t i, j, it
    cdef bint moved

    for i in range(n):
        x[i] = x[i] + vx[i] * dt
        y[i] = y[i] + vy[i] * dt

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

    for it in range(CLEANUP_PASSES):
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


def advance(double[:, ::1] state, Py_ssize_t n_substeps, double dt, double radius):
    """Advance a single ``[B, 4]`` float64 state in place by ``n_substeps``."""
    cdef Py_ssize_t n = state.shape[0]
    cdef double[::1] x = np.ascontiguousarray(state[:, 0])
    cdef double[::1] y = np.ascontiguousarray(state[:, 1])
    cdef double[::1] vx = np.ascontiguousarray(state[:, 2])
    cdef double[::1] vy = np.ascontiguousarray(state[:, 3])
    cdef Py_ssize_t s, i
    with nogil:
        for s in range(n_substeps):
            _substep(&x[0], &y[0], &vx[0], &vy[0], n, dt, radius)
    for i in range(n):
        state[i, 0] = x[i]
        state[i, 1] = y[i]
        state[i, 2] = vx[i]
        state[i, 3] = vy[i]


def simulate(initial, Py_ssize_t n_frames, Py_ssize_t stride, double dt, double radius):
    """Roll ``[N, B, 4]`` initial states forward, recording every ``stride`` substeps."""
    cdef double[:, :, ::1] init = np.ascontiguousarray(initial, dtype=np.float64)
    cdef Py_ssize_t n_sims = init.shape[0]
    cdef Py_ssize_t n = init.shape[1]
    out_arr = np.empty((n_sims, n_frames, n, 4), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    buf = np.empty((4, n if n > 0 else 1), dtype=np.float64)
    cdef double[:, ::1] b = buf
    cdef Py_ssize_t k, t, s, i
    with nogil:
        for k in range(n_sims):
            for i in range(n):
                b[0, i] = init[k, i, 0]
                b[1, i] = init[k, i, 1]
                b[2, i] = init[k, i, 2]
                b[3, i] = init[k, i, 3]
            for t in range(n_frames):
                if t > 0:
                    for s in range(stride):
                        _substep(&b[0, 0], &b[1, 0], &b[2, 0], &b[3, 0], n, dt, radius)
                for i in range(n):
                    out[k, t, i, 0] = b[0, i]
                    out[k, t, i, 1] = b[1, i]
                    out[k, t, i, 2] = b[2, i]
                    out[k, t, i, 3] = b[3, i]
    return out_arr
