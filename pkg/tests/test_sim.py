import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdesign.sim import (BallState, InvalidStateError, PackingError, SimConfig, check_frames, generate_dataset,
                            generate_trajectories, kinetic_energy, momentum, pixels_to_box, project_feasible,
                            read_dataset, rollout, sample_initial_state, simulate_batch, step)
from compdesign.sim._backend import get_kernel
from compdesign.sim.dataset import MAGIC, config_digest

R = 0.1


def test_free_flight():
    out = step([BallState((0.5, 0.5), (0.2, 0.0))], 0.1, R)
    assert out[0].position == pytest.approx((0.52, 0.5), abs=1e-12)
    assert out[0].velocity == pytest.approx((0.2, 0.0), abs=1e-12)


def test_wall_reflection_mirrors_about_contact_line():
    out = step(np.array([[0.89, 0.5, 0.3, 0.0]]), 0.1, R)
    # free flight would reach 0.92, i.e. 0.02 past x = 0.9
    assert out[0, 0] == pytest.approx(0.88, abs=1e-12)
    assert out[0, 2] == pytest.approx(-0.3, abs=1e-12)


def test_head_on_collision_swaps_velocities():
    v = 0.3
    s = np.array([[0.39, 0.5, v, 0.0], [0.61, 0.5, -v, 0.0]])
    out = step(s, 0.05, R)   # closes 0.03 of the 0.02 gap
    assert out[0, 2] == pytest.approx(-v)
    assert out[1, 2] == pytest.approx(v)
    assert out[:, 3] == pytest.approx([0.0, 0.0])


def test_non_finite_state_rejected():
    with pytest.raises(InvalidStateError):
        step(np.array([[np.nan, 0.5, 0.0, 0.0]]), 0.1, R)


def test_overlapping_start_rejected():
    with pytest.raises(InvalidStateError):
        step(np.array([[0.5, 0.5, 0, 0], [0.55, 0.5, 0, 0]]), 0.1, R)


def test_energy_drift_over_1000_substeps():
    cfg = SimConfig(n_bodies=2)
    s = sample_initial_state(cfg, np.random.default_rng(3))
    e0 = kinetic_energy(s)
    arr = s.copy()
    get_kernel().advance(arr, 1000, cfg.dt_sim, cfg.radius)
    assert abs(kinetic_energy(arr) - e0) / e0 <= 1e-9


def test_rollout_frame_count_and_first_frame():
    cfg = SimConfig(n_bodies=2, record_stride=4, n_steps_sim=1000)
    s = sample_initial_state(cfg, np.random.default_rng(0))
    traj = rollout(s, cfg)
    assert traj.data.shape == (250, 2, 4)
    assert np.array_equal(traj.data[0], s)
    assert traj.dt_record == pytest.approx(1 / 15)


def test_zero_velocity_is_constant():
    cfg = SimConfig(n_bodies=2)
    s = np.array([[0.3, 0.3, 0, 0], [0.7, 0.7, 0, 0]], dtype=float)
    traj = rollout(s, cfg, n_frames=50)
    assert np.all(traj.data == s)


def _triangle_wave(x0, v, t, lo, hi):
    # unfold the reflections onto a circle of length 2L
    L = hi - lo
    u = (x0 - lo + v * t) % (2 * L)
    return lo + (u if u <= L else 2 * L - u)


def test_single_ball_matches_triangle_wave():
    cfg = SimConfig(n_bodies=1)
    x0, vx = 0.3, 0.47
    traj = rollout(np.array([[x0, 0.5, vx, 0.0]]), cfg, n_frames=200)
    t = np.arange(200) * cfg.dt_record
    expected = [_triangle_wave(x0, vx, ti, R, 1 - R) for ti in t]
    assert np.max(np.abs(traj.data[:, 0, 0] - expected)) < 1e-6


def test_rollout_deterministic_and_backends_agree():
    cfg = SimConfig(n_bodies=3)
    rng = np.random.default_rng(11)
    init = np.stack([sample_initial_state(cfg, rng) for _ in range(5)])
    a = simulate_batch(init, 120, cfg, backend="python")
    b = simulate_batch(init, 120, cfg, backend="python")
    assert np.array_equal(a, b)
    c = simulate_batch(init, 120, cfg)
    assert np.max(np.abs(a - c)) < 1e-12


def test_reversibility_without_collisions():
    cfg = SimConfig(n_bodies=1)
    s = np.array([[0.4, 0.45, 0.1, -0.05]])
    fwd = step(s, 0.2, R)
    back = step(fwd * np.array([1, 1, -1, -1]), 0.2, R)
    assert np.max(np.abs(back[:, :2] - s[:, :2])) < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 5))
def test_energy_and_frames_invariants(seed, n):
    cfg = SimConfig(n_bodies=n)
    s = sample_initial_state(cfg, np.random.default_rng(seed))
    data = simulate_batch(s[None], 60, cfg)[0]
    e = np.array([kinetic_energy(f) for f in data])
    assert np.max(np.abs(e - e[0])) <= 1e-9 * max(e[0], 1e-12)
    check_frames(data, cfg.radius)


@settings(max_examples=30, deadline=None)
@given(v=st.floats(0.05, 0.7), dy=st.floats(-0.15, 0.15), vy=st.floats(-0.3, 0.3))
def test_pair_collision_conserves_momentum(v, dy, vy):
    # far from walls, so only the pair contact exchanges momentum
    s = np.array([[0.38, 0.5, v, vy], [0.62, 0.5 + dy, -v, 0.0]])
    p0 = momentum(s)
    arr = s.copy()
    get_kernel().advance(arr, 10, 1 / 60, R)
    assert np.all(np.abs(arr[:, :2] - 0.5) < 0.4 - R)
    assert np.max(np.abs(momentum(arr) - p0)) <= 1e-9


def test_packing_rejected():
    with pytest.raises(PackingError):
        SimConfig(n_bodies=26, radius=0.1)


def test_pixels_to_box():
    assert pixels_to_box(100) == 0.5


def test_dataset_roundtrip_and_header(tmp_path):
    cfg = SimConfig(n_bodies=2, n_steps_sim=40, seed=5)
    summary = generate_dataset(cfg, 3, tmp_path / "d.bin")
    head, data = read_dataset(summary.path)
    assert head.n_sims == 3 and head.n_frames == 10 and head.n_bodies == 2
    assert head.seed == 5 and head.digest == config_digest(cfg)
    assert head.dt_record == pytest.approx(cfg.dt_record)
    assert summary.path.read_bytes()[:len(MAGIC)] == MAGIC
    assert np.allclose(data, generate_trajectories(cfg, 3), atol=1e-6)


def test_empty_dataset(tmp_path):
    summary = generate_dataset(SimConfig(), 0, tmp_path / "e.bin")
    head, data = read_dataset(summary.path)
    assert head.n_sims == 0 and data.shape == (0, 250, 2, 4)


def test_initial_speeds_uniform():
    stats = pytest.importorskip("scipy.stats")
    cfg = SimConfig(n_bodies=2, n_steps_sim=4)
    v = generate_trajectories(cfg, 200)[:, 0, :, 2:].ravel()
    assert stats.kstest(v, stats.uniform(loc=-0.5, scale=1.0).cdf).statistic < 0.05


def test_project_feasible_separates_and_clamps():
    s = np.array([[0.5, 0.5, 0, 0], [0.5, 0.5, 0.1, 0], [1.2, -0.3, 0, 0]])
    out, disp = project_feasible(s, R)
    check_frames(out[None], R)
    assert disp > 0
    same, d0 = project_feasible(np.array([[0.3, 0.3, 0, 0], [0.7, 0.7, 0, 0]]), R)
    assert d0 == 0.0 and math.isclose(same[0, 0], 0.3)
