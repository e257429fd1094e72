import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdesign.denoiser import DenoiserConfig
from compdesign.diffusion import (MAX_BETA, DiffusionModel, FeatureScaler, TrainConfig, TrainingError, clip_eps,
                                  cosine_schedule, ddpm_transition, extract_windows, guided_eps, q_sample,
                                  respace, sample, train)
from compdesign.sim import SimConfig, generate_trajectories

TINY = dict(window_len=8, channels=4, base_width=8, depth=2, channel_factors=(1, 2),
            blocks_per_level=1, step_embed_dim=8, groups=4)


def test_schedule_closed_form_small():
    S, off = 10, 0.008
    sched = cosine_schedule(S)
    f = [math.cos((s / S + off) / (1 + off) * math.pi / 2) ** 2 for s in range(S + 1)]
    for s in range(1, S + 1):
        ab = f[s] / f[0]
        assert sched.alpha_bar[s] == pytest.approx(ab, rel=1e-12)
        beta = min(1 - ab / (f[s - 1] / f[0]), 0.999)
        assert sched.beta[s] == pytest.approx(beta, rel=1e-12)


def test_schedule_endpoints_and_shape():
    sched = cosine_schedule(1000)
    assert sched.alpha_bar[0] == 1.0
    assert sched.alpha_bar[1000] < 1e-3
    assert len(sched.beta) == len(sched.alpha_bar) == len(sched.sigma) == 1001
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(sched.beta[1:] > 0) and sched.beta.max() <= MAX_BETA
    assert np.all(sched.sigma[1:] <= np.sqrt(sched.beta[1:]) + 1e-15)


def test_schedule_needs_a_step():
    with pytest.raises(ValueError):
        cosine_schedule(0)


def test_q_sample_edge_cases():
    sched = cosine_schedule(100)
    z0 = np.random.default_rng(0).standard_normal((4, 6))
    eps = np.random.default_rng(1).standard_normal((4, 6))
    assert np.array_equal(q_sample(z0, 0, eps, sched), z0)
    assert np.allclose(q_sample(z0, 30, np.zeros_like(z0), sched), np.sqrt(sched.alpha_bar[30]) * z0)
    with pytest.raises(ValueError):
        q_sample(z0, 3, eps[:2], sched)


@pytest.mark.parametrize("s", [10, 500, 990])
def test_q_sample_moments(s):
    sched = cosine_schedule(1000)
    rng = np.random.default_rng(s)
    x0 = np.full(100_000, 0.7)
    z = q_sample(x0, s, rng.standard_normal(x0.shape), sched)
    ab = sched.alpha_bar[s]
    assert z.var() == pytest.approx(1 - ab, rel=0.02)
    assert z.mean() == pytest.approx(np.sqrt(ab) * 0.7, abs=0.01)


@settings(max_examples=40, deadline=None)
@given(s=st.integers(1, 900), seed=st.integers(0, 1000))
def test_perfect_noise_prediction_recovers_clean(s, seed):
    sched = cosine_schedule(1000)
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((3, 5))
    eps = rng.standard_normal((3, 5))
    zs = q_sample(z0, s, eps, sched)
    ab = sched.alpha_bar[s]
    assert np.allclose((zs - np.sqrt(1 - ab) * eps) / np.sqrt(ab), z0, atol=1e-6)


def test_respace_keeps_selected_levels():
    base = cosine_schedule(1000)
    r = respace(base, 50)
    assert r.S == 50
    assert r.model_steps[0] == 0 and r.model_steps[-1] == 1000
    assert np.array_equal(r.alpha_bar, base.alpha_bar[r.model_steps])
    assert r.model_step(50) == 1000
    assert base.model_step(17) == 17
    full = respace(base, 1000)
    assert np.allclose(full.beta, base.beta) and np.allclose(full.sigma, base.sigma)


def test_feature_scaler_roundtrip():
    sc = FeatureScaler()
    u = np.random.default_rng(2).uniform(0, 1, (5, 8))
    assert np.allclose(sc.to_box(sc.to_model(u)), u)
    assert np.allclose(sc.to_model(np.array([0.5, 0.5, 0.0, 0.0])), 0)


def test_extract_windows_shape():
    data = np.zeros((3, 30, 2, 4))
    assert extract_windows(data, 24).shape == (3 * 7, 24, 8)
    with pytest.raises(ValueError):
        extract_windows(data, 31)


def _one_body_windows(n_sims=4):
    cfg = SimConfig(n_bodies=1, n_steps_sim=64, seed=1)
    return extract_windows(generate_trajectories(cfg, n_sims), 8, stride=4)


def test_single_datapoint_overfits():
    w = _one_body_windows()[:1]
    model = DiffusionModel(DenoiserConfig(**TINY), cosine_schedule(100))
    res = train(model, w, TrainConfig(batch_size=8, lr=3e-3, total_steps=2000, checkpoint_every=0))
    assert np.mean(res.losses[-100:]) < 0.5
    assert np.mean(res.losses[-100:]) < np.mean(res.losses[:100])


def test_default_batch_shape_accepted(tmp_path):
    cfg = SimConfig(n_bodies=2, n_steps_sim=120, seed=0)
    w = extract_windows(generate_trajectories(cfg, 2), 24)
    model = DiffusionModel(DenoiserConfig())
    res = train(model, w, TrainConfig(total_steps=2, log_every=1, checkpoint_every=0), out_dir=tmp_path)
    assert len(res.losses) == 2 and all(np.isfinite(res.losses))
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert rows[0] == ["step", "loss", "lr", "ema_decay"] and len(rows) == 3
    assert (tmp_path / "last.ckpt").exists()


def test_training_reproducible_and_checkpoint_roundtrip(tmp_path):
    w = _one_body_windows()
    cfg = TrainConfig(batch_size=8, lr=1e-3, total_steps=20, checkpoint_every=0)
    a = train(DiffusionModel(DenoiserConfig(**TINY), cosine_schedule(50)), w, cfg, out_dir=tmp_path)
    b = train(DiffusionModel(DenoiserConfig(**TINY), cosine_schedule(50)), w, cfg)
    assert a.losses == b.losses
    loaded = DiffusionModel.load(tmp_path / "last.ckpt")
    z = np.random.default_rng(0).standard_normal((2, 8, 4))
    assert np.array_equal(loaded.eps(z, 10), a.model.eps(z, 10))


def test_training_rejects_bad_windows():
    model = DiffusionModel(DenoiserConfig(**TINY))
    with pytest.raises(TrainingError):
        train(model, np.zeros((0, 8, 4)), TrainConfig(total_steps=1))
    with pytest.raises(TrainingError):
        train(model, np.zeros((3, 12, 4)), TrainConfig(total_steps=1))


def test_lr_step_decay():
    cfg = TrainConfig(lr=1e-3, lr_decay_start=100, lr_decay_every=50, lr_decay_factor=0.5)
    assert cfg.lr_at(99) == 1e-3
    assert cfg.lr_at(100) == 5e-4
    assert cfg.lr_at(150) == 2.5e-4


def zero_model(z, s):
    return np.zeros_like(z)


def test_zero_model_single_step_closed_form():
    # S = 1, eps = 0: x0 = z1 / sqrt(alpha_1) with no added noise on the last step
    sched = cosine_schedule(1)
    z = sample(zero_model, sched, 200_000, rng=np.random.default_rng(0), shape=(1,), clip_x0=None)
    assert z.std() == pytest.approx(1 / np.sqrt(sched.alpha[1]), rel=0.01)
    z1 = np.random.default_rng(0).standard_normal((200_000, 1))
    assert np.allclose(z, z1 / np.sqrt(sched.alpha[1]))


def test_zero_guidance_is_bitwise_unguided():
    sched = cosine_schedule(20)

    def model(z, s):
        return 0.1 * z + 0.01 * s

    def grad(z):
        return np.ones_like(z)

    a = sample(model, sched, 5, rng=np.random.default_rng(3), shape=(4, 2))
    b = sample(model, sched, 5, guidance=grad, lam=0.0, rng=np.random.default_rng(3), shape=(4, 2))
    assert np.array_equal(a, b)


def test_sample_space_guidance_moves_by_lambda_gradient():
    sched = cosine_schedule(50)
    z = np.random.default_rng(4).standard_normal((3, 4))
    g = np.random.default_rng(5).standard_normal((3, 4))
    eps = np.zeros_like(z)
    s = 20
    plain = ddpm_transition(z, eps, s, sched, np.random.default_rng(0))
    moved = ddpm_transition(z, guided_eps(eps, z, s, sched, lambda _: g, 0.3, "sample"), s, sched,
                            np.random.default_rng(0))
    assert np.allclose(moved - plain, -0.3 * g)


def test_guidance_space_scalings():
    sched = cosine_schedule(50)
    z = np.zeros((1, 2))
    g = np.ones((1, 2))
    e = guided_eps(np.zeros((1, 2)), z, 10, sched, lambda _: g, 2.0, "eps")
    assert np.allclose(e, 2.0 * np.sqrt(1 - sched.alpha_bar[10]))
    assert np.allclose(guided_eps(np.zeros((1, 2)), z, 10, sched, lambda _: g, 2.0, "raw"), 2.0)
    with pytest.raises(ValueError):
        guided_eps(np.zeros((1, 2)), z, 10, sched, lambda _: g, 2.0, "bogus")


def test_clip_eps_identity_in_range_and_bounds_clean_estimate():
    sched = cosine_schedule(100)
    s = 95
    ab = sched.alpha_bar[s]
    z = np.array([[0.3, -0.2]])
    eps = (z - np.sqrt(ab) * np.array([[0.5, -1.0]])) / np.sqrt(1 - ab)
    assert clip_eps(z, eps, s, sched, 2.0) is eps
    far = (z - np.sqrt(ab) * np.array([[5.0, -1.0]])) / np.sqrt(1 - ab)
    out = clip_eps(z, far, s, sched, 2.0)
    x0 = (z - np.sqrt(1 - ab) * out) / np.sqrt(ab)
    assert np.allclose(x0, [[2.0, -1.0]])
