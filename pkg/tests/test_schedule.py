import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from actiondiff.errors import ContractError, ParameterError
from actiondiff.schedule import (
    NoiseSchedule,
    forward_diffuse,
    make_schedule,
    reverse_step,
    sampling_timesteps,
)


def test_single_step_product():
    s = make_schedule(T=1, beta_start=0.5, beta_end=0.5)
    assert np.allclose(s.alpha_bar, [0.5])


def test_three_step_closed_form():
    s = make_schedule(T=3, beta_start=0.1, beta_end=0.1)
    assert np.allclose(s.alpha_bar, [0.9, 0.81, 0.729])


def test_long_schedule_against_product_loop():
    # oracle: explicit cumulative product loop
    s = make_schedule(T=1000, beta_start=1e-4, beta_end=2e-2)
    acc = 1.0
    expected = []
    betas = np.linspace(1e-4, 2e-2, 1000)
    for b in betas:
        acc *= 1.0 - b
        expected.append(acc)
    assert np.allclose(s.alpha_bar, expected, rtol=0, atol=1e-15)
    assert s.abar(1000) == pytest.approx(expected[-1], abs=1e-15)


def test_invalid_ranges():
    with pytest.raises(ParameterError):
        make_schedule(T=0)
    with pytest.raises(ParameterError):
        make_schedule(beta_start=0.0)
    with pytest.raises(ParameterError):
        make_schedule(beta_start=0.5, beta_end=0.2)
    with pytest.raises(ParameterError):
        make_schedule(beta_end=1.0)
    with pytest.raises(ParameterError):
        make_schedule(kind="cosine")


@settings(max_examples=40, deadline=None)
@given(
    t=st.integers(1, 300),
    b0=st.floats(1e-6, 0.3),
    b1=st.floats(1e-6, 0.9),
)
def test_invariants_hold_for_any_valid_schedule(t, b0, b1):
    b0, b1 = min(b0, b1), max(b0, b1)
    s = make_schedule(T=t, beta_start=b0, beta_end=b1)
    assert np.all(s.beta > 0) and np.all(s.beta < 1)
    assert np.all(np.diff(s.alpha_bar) < 0) or t == 1
    assert np.all(s.alpha_bar > 0)
    assert s.alpha_bar[0] == pytest.approx(1 - s.beta_at(1), abs=0)
    assert np.all(s.alpha_bar <= 1 - s.beta_at(1))


def test_forward_diffuse_zero_noise():
    s = make_schedule(T=10)
    z0 = torch.randn(2, 4, 3, 3, generator=torch.Generator().manual_seed(0))
    out = forward_diffuse(z0, 5, torch.zeros_like(z0), s)
    assert torch.allclose(out, np.sqrt(s.abar(5)) * z0)


def test_forward_diffuse_degenerate_identity():
    # hand-built schedule with abar = 1 bypasses make_schedule validation
    s = NoiseSchedule(T=1, beta=np.array([0.0]), alpha_bar=np.array([1.0]))
    z0 = torch.randn(1, 4, 2, 2, generator=torch.Generator().manual_seed(1))
    eps = torch.randn_like(z0)
    assert torch.equal(forward_diffuse(z0, 1, eps, s), z0)


def test_forward_diffuse_scalar_hand_value():
    s = NoiseSchedule(T=1, beta=np.array([0.75]), alpha_bar=np.array([0.25]))
    z0 = torch.full((1, 1, 1, 1), 1.0, dtype=torch.float64)
    eps = torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)
    out = forward_diffuse(z0, 1, eps, s)
    assert out.item() == pytest.approx(0.5 + np.sqrt(0.75) * 2.0, rel=1e-12)


def test_forward_diffuse_contracts():
    s = make_schedule(T=4)
    z0 = torch.zeros(1, 4, 2, 2)
    with pytest.raises(ContractError):
        forward_diffuse(z0, 1, torch.zeros(1, 4, 2, 3), s)
    with pytest.raises(ContractError):
        forward_diffuse(z0, 0, torch.zeros_like(z0), s)
    with pytest.raises(ContractError):
        forward_diffuse(z0, 5, torch.zeros_like(z0), s)


def test_forward_diffuse_per_sample_timesteps():
    s = make_schedule(T=20)
    z0 = torch.randn(3, 2, 2, 2, generator=torch.Generator().manual_seed(2))
    eps = torch.randn_like(z0)
    batched = forward_diffuse(z0, torch.tensor([3, 9, 20]), eps, s)
    for i, t in enumerate((3, 9, 20)):
        single = forward_diffuse(z0[i], t, eps[i], s)
        assert torch.allclose(batched[i], single, atol=1e-7)


def test_ddim_single_step_inversion():
    s = make_schedule(T=1, beta_start=0.3, beta_end=0.3)
    gen = torch.Generator().manual_seed(3)
    z0 = torch.randn(2, 4, 4, 4, generator=gen)
    eps = torch.randn(2, 4, 4, 4, generator=gen)
    z1 = forward_diffuse(z0, 1, eps, s)
    rec = reverse_step(z1, eps, 1, s, sampler="ddim", eta=0.0)
    assert (rec - z0).abs().max() < 1e-5


def test_ddim_deterministic_bitwise():
    s = make_schedule(T=10)
    gen = torch.Generator().manual_seed(4)
    z = torch.randn(1, 4, 2, 2, generator=gen)
    e = torch.randn_like(z)
    a = reverse_step(z, e, 7, s, sampler="ddim", eta=0.0)
    b = reverse_step(z, e, 7, s, sampler="ddim", eta=0.0)
    assert torch.equal(a, b)


def test_ddpm_matches_posterior_transcription():
    # oracle: direct transcription of the fixed-small posterior update
    s = make_schedule(T=10)
    gen = torch.Generator().manual_seed(5)
    z = torch.randn(1, 1, 1, 1, generator=gen)
    e = torch.randn_like(z)
    t = 6
    out = reverse_step(z, e, t, s, sampler="ddpm", rng=torch.Generator().manual_seed(9))

    beta_t = s.beta_at(t)
    abar_t, abar_p = s.abar(t), s.abar(t - 1)
    alpha_t = 1.0 - beta_t
    mean = (z.item() - beta_t / np.sqrt(1 - abar_t) * e.item()) / np.sqrt(alpha_t)
    var = (1 - abar_p) / (1 - abar_t) * beta_t
    noise = torch.empty(1, 1, 1, 1).normal_(
        generator=torch.Generator().manual_seed(9)
    ).item()
    assert out.item() == pytest.approx(mean + np.sqrt(var) * noise, rel=1e-6)


def test_ddpm_final_step_is_noiseless():
    s = make_schedule(T=5)
    z = torch.ones(1, 1, 1, 1)
    e = torch.ones_like(z) * 0.3
    a = reverse_step(z, e, 1, s, sampler="ddpm", rng=torch.Generator().manual_seed(0))
    b = reverse_step(z, e, 1, s, sampler="ddpm", rng=torch.Generator().manual_seed(99))
    assert torch.equal(a, b)


def test_reverse_step_contracts():
    s = make_schedule(T=5)
    z = torch.zeros(1, 1, 1, 1)
    with pytest.raises(ContractError):
        reverse_step(z, z, 6, s)
    with pytest.raises(ContractError):
        reverse_step(z, torch.zeros(2, 1, 1, 1), 2, s)
    with pytest.raises(ContractError):
        reverse_step(z, z, 3, s, sampler="ddpm", rng=None)
    with pytest.raises(ParameterError):
        reverse_step(z, z, 3, s, sampler="euler")


def test_variance_law():
    # empirical mean/variance of the forward map over many noise draws
    s = make_schedule(T=50)
    n = 10000
    gen = torch.Generator().manual_seed(11)
    z0 = 0.7
    for t in (12, 25, 50):
        eps = torch.randn(n, generator=gen)
        z_t = forward_diffuse(
            torch.full((n,), z0).reshape(n, 1, 1, 1),
            t,
            eps.reshape(n, 1, 1, 1),
            s,
        ).reshape(n)
        want_mean = np.sqrt(s.abar(t)) * z0
        want_var = 1.0 - s.abar(t)
        se = np.sqrt(want_var / n)
        assert abs(z_t.mean().item() - want_mean) < 3 * se
        assert abs(z_t.var().item() - want_var) / want_var < 0.05


def test_sampling_timesteps():
    assert sampling_timesteps(50, 50) == list(range(50, 0, -1))
    assert sampling_timesteps(50, 1) == [50]
    sub = sampling_timesteps(50, 10)
    assert sub[0] == 50 and sub[-1] == 1
    assert all(a > b for a, b in zip(sub, sub[1:]))
    assert sampling_timesteps(50, 200) == list(range(50, 0, -1))
    with pytest.raises(ParameterError):
        sampling_timesteps(50, 0)


def test_strided_ddim_consistent_with_adjacent():
    # t=2 -> 0 in one stride equals two exact steps when eps_hat is the true eps
    s = make_schedule(T=2, beta_start=0.2, beta_end=0.2)
    gen = torch.Generator().manual_seed(6)
    z0 = torch.randn(1, 2, 2, 2, generator=gen)
    eps = torch.randn_like(z0)
    z2 = forward_diffuse(z0, 2, eps, s)
    direct = reverse_step(z2, eps, 2, s, sampler="ddim", eta=0.0, t_prev=0)
    assert (direct - z0).abs().max() < 1e-5
