"""Time the compiled and pure-Python simulator kernels on the same rollouts.

    python benchmarks/bench_sim.py [--sims 10] [--frames 250] [--bodies 2 4 8] [--repeat 3]

Prints seconds per rollout batch for each backend, the speedup, and the largest
difference between the two outputs.
"""
import argparse
import time

import numpy as np

from compdesign.sim import SimConfig, sample_initial_state, simulate_batch


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sims", type=int, default=10)
    ap.add_argument("--frames", type=int, default=250)
    ap.add_argument("--bodies", type=int, nargs="+", default=[2, 4, 8])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    try:
        simulate_batch(np.array([[[0.5, 0.5, 0.0, 0.0]]]), 2, SimConfig(n_bodies=1), backend="cython")
    except ImportError:
        raise SystemExit("compiled kernel not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'bodies':>6} {'python s':>10} {'cython s':>10} {'speedup':>8} {'max |diff|':>11}")
    for B in args.bodies:
        cfg = SimConfig(n_bodies=B)
        rng = np.random.default_rng(B)
        init = np.stack([sample_initial_state(cfg, rng) for _ in range(args.sims)])
        t_py, a = best_time(lambda: simulate_batch(init, args.frames, cfg, backend="python"), args.repeat)
        t_c, b = best_time(lambda: simulate_batch(init, args.frames, cfg, backend="cython"), args.repeat)
        print(f"{B:>6} {t_py:>10.3f} {t_c:>10.4f} {t_py / t_c:>7.0f}x {np.max(np.abs(a - b)):>11.1e}")


if __name__ == "__main__":
    main()
