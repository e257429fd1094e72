import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdesign import numerics as N
from compdesign.denoiser import (DenoiserConfig, UNet1D, expected_parameter_count, score_from_eps,
                                 sinusoidal_embedding)
from compdesign.diffusion import cosine_schedule, q_sample
from compdesign.numerics import ShapeError, Tensor, backward, default_dtype

TINY = dict(window_len=8, channels=4, base_width=8, depth=2, channel_factors=(1, 2),
            blocks_per_level=1, step_embed_dim=8, groups=4)


def test_default_output_shape():
    net = UNet1D(DenoiserConfig())
    z = np.random.default_rng(0).standard_normal((32, 24, 8)).astype(np.float32)
    assert net(z, 500).shape == (32, 24, 8)


def test_zero_initialised_output_layer_gives_zero():
    net = UNet1D(DenoiserConfig(**TINY))
    z = np.random.default_rng(1).standard_normal((3, 8, 4))
    assert np.all(net(z, 7).data == 0)


def test_wrong_window_rejected():
    net = UNet1D(DenoiserConfig(**TINY))
    with pytest.raises(ShapeError, match=r"\[batch, 8, 4\]"):
        net(np.zeros((2, 12, 4)), 1)


def test_input_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    with default_dtype(np.float64):
        net = UNet1D(DenoiserConfig(**TINY))
        # the output layer starts at zero; perturb it so the Jacobian is non-trivial
        net.out_conv.weight.data = rng.standard_normal(net.out_conv.weight.shape) * 0.3
        z = rng.standard_normal((2, 8, 4))
        proj = rng.standard_normal((2, 8, 4))
        zt = Tensor(z.copy(), requires_grad=True)
        backward(N.tsum(N.mul(net(zt, 40), Tensor(proj))))
        h = 1e-5
        num = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            num[idx] = (np.sum(net(zp, 40).data * proj) - np.sum(net(zm, 40).data * proj)) / (2 * h)
    err = np.linalg.norm(zt.grad - num) / np.linalg.norm(num)
    assert err < 1e-3


@settings(max_examples=15, deadline=None)
@given(width=st.sampled_from([4, 8, 16]), depth=st.integers(1, 3), blocks=st.integers(1, 2),
       gated=st.booleans(), timed=st.booleans())
def test_parameter_count_closed_form(width, depth, blocks, gated, timed):
    cfg = DenoiserConfig(window_len=8, channels=4, base_width=width, depth=depth,
                         channel_factors=tuple(2 ** i for i in range(depth)), blocks_per_level=blocks,
                         step_embed_dim=8, groups=4, gated_mixing=gated, time_conditioned=timed)
    assert UNet1D(cfg).num_parameters() == expected_parameter_count(cfg)


def test_same_seed_same_weights():
    a = UNet1D(DenoiserConfig(**TINY)).state_dict()
    b = UNet1D(DenoiserConfig(**TINY)).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_step_embedding_distinguishes_steps():
    e = sinusoidal_embedding(np.arange(1001), 32)
    assert e.shape == (1001, 32)
    d = np.linalg.norm(e[1:] - e[:-1], axis=1)
    assert d.min() > 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(window_len=20, depth=3)
    with pytest.raises(ValueError):
        DenoiserConfig(depth=2, channel_factors=(1, 2, 4))


def test_score_undefined_at_step_zero():
    sched = cosine_schedule(100)
    with pytest.raises(ValueError):
        score_from_eps(np.zeros((1, 3)), sched, 0)


def test_score_of_zero_prediction_is_zero():
    sched = cosine_schedule(100)
    assert np.all(score_from_eps(np.zeros((2, 3)), sched, 50) == 0)


@pytest.mark.parametrize("s", [50, 300, 700])
def test_score_matches_gaussian_oracle(s):
    # for data N(0, v) the noisy marginal is N(0, abar*v + 1 - abar), whose score is -z / var.
    # The best linear noise predictor is fitted by least squares on samples, independently of that formula.
    sched = cosine_schedule(1000)
    rng = np.random.default_rng(s)
    v = 0.3
    x0 = rng.normal(0.0, np.sqrt(v), 200_000)
    eps = rng.standard_normal(x0.shape)
    z = q_sample(x0, s, eps, sched)
    coef = np.dot(z, eps) / np.dot(z, z)
    grid = np.linspace(-2, 2, 9)
    score = score_from_eps(coef * grid, sched, s)
    ab = sched.alpha_bar[s]
    oracle = -grid / (ab * v + 1 - ab)
    assert np.allclose(score, oracle, rtol=0.05)
