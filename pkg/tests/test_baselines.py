import numpy as np
import pytest

from compdesign import numerics as N
from compdesign.baselines import (BackpropConfig, BaselineError, CemConfig, SurrogateModel, SurrogateTrainConfig,
                                  backprop_design, cem_design, clamp_gamma, default_backbone, n_segments,
                                  rollout_objective_grad, surrogate_pairs, train_surrogate)
from compdesign.compose import DesignObjective, objective_and_grad
from compdesign.diffusion import FeatureScaler
from compdesign.numerics import Tensor, default_dtype, no_grad

SMALL = dict(base_width=8, step_embed_dim=8, groups=4)


def _constant_data(n=12, T=30, B=2, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.15, 0.85, (n, 1, B, 2))
    frames = np.concatenate([pos, np.zeros((n, 1, B, 2))], axis=-1)
    return np.repeat(frames, T, axis=1)


def test_one_step_surrogate_learns_identity_on_resting_bodies():
    data = _constant_data()
    res = train_surrogate("1-step", data, SurrogateTrainConfig(batch_size=16, total_steps=200, log_every=50),
                          backbone=default_backbone("1-step", **SMALL))
    pred = res.model.rollout(data[:, 0], 30)
    assert np.mean((pred - data) ** 2) < 1e-4
    assert res.val_mae < 1e-2


def test_twenty_three_step_prediction_shape():
    model = SurrogateModel("23-step", default_backbone("23-step", **SMALL))
    out = model.predict(Tensor(np.zeros((5, 8), dtype=np.float32)))
    assert out.shape == (5, 23, 8)


def test_chained_rollout_covers_longer_horizon():
    model = SurrogateModel("23-step", default_backbone("23-step", **SMALL))
    gamma = np.random.default_rng(0).uniform(0.2, 0.8, (3, 2, 4))
    traj = model.rollout(gamma, 44)
    assert traj.shape == (3, 44, 2, 4)
    assert np.allclose(traj[:, 0], gamma, atol=1e-6)
    assert n_segments(44, 23) == 2
    assert n_segments(24, 23) == 1
    assert n_segments(24, 1) == 23


def test_surrogate_training_deterministic(tmp_path):
    data = _constant_data(seed=2)
    cfg = SurrogateTrainConfig(batch_size=8, total_steps=10)
    a = train_surrogate("1-step", data, cfg, backbone=default_backbone("1-step", **SMALL), out_dir=tmp_path)
    b = train_surrogate("1-step", data, cfg, backbone=default_backbone("1-step", **SMALL))
    assert a.losses == b.losses
    loaded = SurrogateModel.load(tmp_path / "last.ckpt")
    g = data[:2, 0]
    assert np.array_equal(loaded.rollout(g, 5), a.model.rollout(g, 5))


def test_surrogate_input_errors():
    with pytest.raises(ValueError):
        SurrogateModel("7-step")
    with pytest.raises(BaselineError, match="too short"):
        surrogate_pairs(np.zeros((2, 10, 2, 4)), 23)
    with pytest.raises(BaselineError):
        train_surrogate("1-step", np.zeros((0, 10, 2, 4)), SurrogateTrainConfig())
    with pytest.raises(BaselineError, match="channels"):
        train_surrogate("1-step", np.zeros((2, 10, 3, 4)), SurrogateTrainConfig(),
                        backbone=default_backbone("1-step", n_bodies=2, **SMALL))


def test_clamp_gamma():
    g = np.array([[[-0.2, 1.3, 2.0, -5.0]]])
    assert np.allclose(clamp_gamma(g, 0.1), [[[0.1, 0.9, 1.0, -1.0]]])


class LinearStub:
    """Final frame position = position + 0.2 * velocity; frames interpolate linearly."""

    n_bodies = 2
    scaler = FeatureScaler()

    def rollout(self, gamma, T_total):
        gamma = np.asarray(gamma)
        w = np.linspace(0, 1, T_total)[None, :, None, None]
        pos = gamma[:, None, :, :2] + 0.2 * w * gamma[:, None, :, 2:]
        vel = np.broadcast_to(gamma[:, None, :, 2:], pos.shape)
        return np.concatenate([pos, vel], axis=-1)


def test_cem_reaches_optimum_of_linear_stub():
    obj = DesignObjective(target=(0.3, 0.7))
    res = cem_design(LinearStub(), obj, CemConfig(seed=1), T_total=10)
    assert res.best[-1] < 0.05
    assert all(b1 <= b0 for b0, b1 in zip(res.best, res.best[1:]))
    final = LinearStub().rollout(res.gamma[None], 10)[0, -1, :, :2]
    assert obj.value(final) == pytest.approx(res.best[-1])


def test_cem_elites_invariant_to_objective_scaling():
    obj = DesignObjective(target=(0.3, 0.7))

    def doubled(traj):
        return 2 * obj.value(traj[:, -1, :, :2])

    a = cem_design(LinearStub(), obj, CemConfig(seed=5, iterations=5), T_total=10)
    b = cem_design(LinearStub(), doubled, CemConfig(seed=5, iterations=5), T_total=10)
    assert all(np.array_equal(x, y) for x, y in zip(a.elite_sets, b.elite_sets))
    assert np.array_equal(a.gamma, b.gamma)


def test_cem_config_validation():
    with pytest.raises(ValueError):
        CemConfig(population=10, elite_frac=0.1)


class ConstantRollout:
    """Differentiable stub whose trajectory repeats the initial frame."""

    n_bodies = 2
    scaler = FeatureScaler()

    def rollout_tensor(self, x0, T_total):
        b, c = x0.shape
        return N.concat([N.reshape(x0, (b, 1, c))] * T_total, axis=1)


def test_backprop_reaches_optimum_of_stub():
    obj = DesignObjective(target=(0.4, 0.6))
    init = np.array([[[0.55, 0.45, 0.0, 0.0], [0.3, 0.5, 0.0, 0.0]]])
    res = backprop_design(ConstantRollout(), obj, BackpropConfig(steps=300, lr=2e-3), 6, init)
    assert res.final[0] < 1e-3
    assert res.trace[-1] <= res.trace[0]


def test_backprop_zero_lr_keeps_initial_state():
    init = np.random.default_rng(0).uniform(0.2, 0.8, (3, 2, 4))
    res = backprop_design(ConstantRollout(), DesignObjective(), BackpropConfig(steps=5, lr=0.0), 6, init)
    assert np.array_equal(res.gamma, clamp_gamma(init, 0.1))


def test_rollout_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    obj = DesignObjective()
    with default_dtype(np.float64):
        model = SurrogateModel("23-step", default_backbone("23-step", **SMALL))
        model.net.out_conv.weight.data = rng.standard_normal(model.net.out_conv.weight.shape) * 0.1
        gamma = rng.uniform(0.2, 0.8, (2, 2, 4))
        J, g = rollout_objective_grad(model, gamma, 30, obj)
        sc = model.scaler

        def total(gm):
            with no_grad():
                traj = model.rollout_tensor(Tensor(sc.to_model(gm.reshape(2, -1))), 30).data
            return objective_and_grad(sc.to_box(traj), obj)[0].sum()

        h = 1e-6
        num = np.zeros_like(gamma)
        for idx in np.ndindex(gamma.shape):
            gp, gm = gamma.copy(), gamma.copy()
            gp[idx] += h
            gm[idx] -= h
            num[idx] = (total(gp) - total(gm)) / (2 * h)
    assert total(gamma) == pytest.approx(J.sum())
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-5
