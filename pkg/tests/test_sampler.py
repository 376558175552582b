import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from i2a.errors import ConfigurationError
from i2a.sampler import (
    ConditionPair,
    GuidanceFactors,
    GuidanceScales,
    NoiseSchedule,
    NoiseSequence,
    adv_score,
    cfg_score,
    denoise_step,
    initial_noise,
    sample,
)

U = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64).unsqueeze(-1)
I = torch.full((2, 2, 1), 2.0, dtype=torch.float64)
F = torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64).unsqueeze(-1)


def branch_denoiser(z, t, image_cond, text_cond):
    """Returns U, I or F depending on which conditioning pair it sees."""
    if float(image_cond.abs().sum()) == 0:
        return U.clone()
    if float(text_cond.abs().sum()) == 0:
        return I.clone()
    return F.clone()


def cond_2x2():
    return ConditionPair(torch.ones(2, 2, 1, dtype=torch.float64), torch.ones(1, dtype=torch.float64),
                         torch.zeros(2, 2, 1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))


def test_cfg_score_hand_value():
    z = torch.zeros(2, 2, 1, dtype=torch.float64)
    out = cfg_score(branch_denoiser, z, 1, cond_2x2(), GuidanceScales(1.5, 7.5))
    # U + 1.5 (I - U) + 7.5 (F - I), element by element
    expected = torch.tensor([[-12.5, -5.5], [-13.5, -6.5]], dtype=torch.float64).unsqueeze(-1)
    assert torch.equal(out, expected)


def test_cfg_zero_scales_is_unconditional():
    z = torch.zeros(2, 2, 1, dtype=torch.float64)
    assert torch.equal(cfg_score(branch_denoiser, z, 1, cond_2x2(), GuidanceScales(0, 0)), U)


@pytest.mark.parametrize("scales", [GuidanceScales(0, 0), GuidanceScales(1.5, 7.5), GuidanceScales(10, 20)])
def test_constant_denoiser_cancels(scales):
    k = torch.full((2, 2, 1), 0.7, dtype=torch.float64)
    out = cfg_score(lambda *a: k.clone(), torch.zeros_like(k), 1, cond_2x2(), scales)
    assert torch.equal(out, k)


def test_adv_score_special_factors():
    z = torch.zeros(2, 2, 1, dtype=torch.float64)
    cond, scales = cond_2x2(), GuidanceScales(1.5, 7.5)
    ones = GuidanceFactors.ones((2, 2, 1), torch.float64)
    zeros = GuidanceFactors(torch.zeros(2, 2, 1, dtype=torch.float64), torch.zeros(2, 2, 1, dtype=torch.float64))
    text_off = GuidanceFactors(torch.ones(2, 2, 1, dtype=torch.float64), torch.zeros(2, 2, 1, dtype=torch.float64))
    assert torch.equal(adv_score(branch_denoiser, z, 1, cond, scales, ones), cfg_score(branch_denoiser, z, 1, cond, scales))
    assert torch.equal(adv_score(branch_denoiser, z, 1, cond, scales, zeros), U)
    assert torch.equal(adv_score(branch_denoiser, z, 1, cond, scales, text_off),
                       cfg_score(branch_denoiser, z, 1, cond, GuidanceScales(1.5, 0.0)))


def test_adv_score_rejects_mismatched_factors():
    z = torch.zeros(2, 2, 1, dtype=torch.float64)
    with pytest.raises(ConfigurationError):
        adv_score(branch_denoiser, z, 1, cond_2x2(), GuidanceScales(), GuidanceFactors.ones((3,), torch.float64))


def test_denoise_step_hand_value():
    z = torch.tensor(1.0, dtype=torch.float64)
    out = denoise_step(z, torch.tensor(-0.5, dtype=torch.float64), 2.0, 1.0, torch.tensor(1.0, dtype=torch.float64))
    assert float(out) == pytest.approx(-0.5 + math.sqrt(0.75), abs=1e-15)
    assert float(out) == pytest.approx(0.3660254037844386, abs=1e-15)


def test_denoise_step_degenerate_cases():
    z = torch.randn(3, dtype=torch.float64)
    s = torch.randn(3, dtype=torch.float64)
    zeta = torch.randn(3, dtype=torch.float64)
    assert torch.equal(denoise_step(z, s, 0.7, 0.7, zeta), z)
    assert torch.equal(denoise_step(z, torch.zeros(3, dtype=torch.float64), 0.7, 0.3, torch.zeros(3, dtype=torch.float64)), z)
    with pytest.raises(ConfigurationError):
        denoise_step(z, s, 0.3, 0.7, zeta)
    with pytest.raises(ZeroDivisionError):
        denoise_step(z, s, 0.0, 0.0, zeta)


def test_sample_telescopes_for_constant_score():
    schedule = NoiseSchedule.geometric(7, 0.05, 2.0)
    k = torch.tensor([0.3, -1.2], dtype=torch.float64)
    z_T = torch.tensor([0.5, 0.25], dtype=torch.float64)
    zeros = NoiseSequence(tuple(torch.zeros(2, dtype=torch.float64) for _ in range(7)), 0)
    cond = ConditionPair(torch.ones(2, dtype=torch.float64), torch.ones(1, dtype=torch.float64),
                         torch.zeros(2, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    z0 = sample(lambda *a: k.clone(), z_T, cond, GuidanceScales(), None, schedule, zeros)
    expected = z_T + (schedule.sigma_max**2 - schedule[0] ** 2) * k
    assert torch.allclose(z0, expected, atol=1e-14, rtol=0)


def test_sample_single_step_is_denoise_step():
    schedule = NoiseSchedule((0.1, 1.0))
    z_T, noise = initial_noise(4, 1, (2, 2, 1), 1.0, torch.float64)
    cond = cond_2x2()
    z0 = sample(branch_denoiser, z_T, cond, GuidanceScales(), None, schedule, noise)
    score = cfg_score(branch_denoiser, z_T, 1, cond, GuidanceScales())
    assert torch.equal(z0, denoise_step(z_T, score, 1.0, 0.1, noise.for_step(1)))


def test_sample_calls_denoiser_three_times_per_step():
    calls = []

    def counting(*args):
        calls.append(args[1])
        return branch_denoiser(*args)

    schedule = NoiseSchedule.geometric(5)
    z_T, noise = initial_noise(0, 5, (2, 2, 1), 1.0, torch.float64)
    sample(counting, z_T, cond_2x2(), GuidanceScales(), GuidanceFactors.ones((2, 2, 1), torch.float64), schedule, noise)
    assert len(calls) == 15
    assert calls == [t for t in range(5, 0, -1) for _ in range(3)]


def test_sample_requires_matching_noise_length():
    schedule = NoiseSchedule.geometric(3)
    z_T, noise = initial_noise(0, 2, (2, 2, 1), 1.0, torch.float64)
    with pytest.raises(ConfigurationError):
        sample(branch_denoiser, z_T, cond_2x2(), GuidanceScales(), None, schedule, noise)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        NoiseSchedule((1.0,))
    with pytest.raises(ConfigurationError):
        NoiseSchedule((0.5, 0.4))
    with pytest.raises(ConfigurationError):
        NoiseSchedule.geometric(0)
    s = NoiseSchedule.geometric(4, 0.01, 1.0)
    assert s.steps == 4 and s[4] == pytest.approx(1.0) and s[0] == pytest.approx(0.01)


def test_initial_noise_is_deterministic():
    a = initial_noise(11, 4, (3, 2), 2.0, torch.float32)
    b = initial_noise(11, 4, (3, 2), 2.0, torch.float32)
    assert torch.equal(a[0], b[0])
    assert all(torch.equal(x, y) for x, y in zip(a[1].zetas, b[1].zetas))
    c = initial_noise(12, 4, (3, 2), 2.0, torch.float32)
    assert not torch.equal(a[0], c[0])


def test_noise_is_precision_independent():
    z32, n32 = initial_noise(5, 3, (4,), 1.0, torch.float32)
    z64, n64 = initial_noise(5, 3, (4,), 1.0, torch.float64)
    assert torch.equal(z32, z64.float())
    assert torch.equal(n32.zetas[2], n64.zetas[2].float())


def test_guidance_scales_validation():
    with pytest.raises(ConfigurationError):
        GuidanceScales(-1.0, 0.0)
    with pytest.raises(ConfigurationError):
        GuidanceScales(1.0, float("nan"))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), s_i=st.floats(0, 10), s_t=st.floats(0, 20))
def test_all_ones_factors_match_cfg_bitwise(seed, s_i, s_t):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(3, 2, 2, 1, generator=gen, dtype=torch.float64)

    def den(z, t, ci, cl):
        return w[0] * z + w[1] * ci + w[2] * cl.sum() / t

    cond = ConditionPair(torch.randn(2, 2, 1, generator=gen, dtype=torch.float64), torch.randn(2, generator=gen, dtype=torch.float64),
                         torch.zeros(2, 2, 1, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    schedule = NoiseSchedule.geometric(4)
    z_T, noise = initial_noise(seed, 4, (2, 2, 1), 1.0, torch.float64)
    scales = GuidanceScales(s_i, s_t)
    plain = sample(den, z_T, cond, scales, None, schedule, noise)
    ones = sample(den, z_T, cond, scales, GuidanceFactors.ones((2, 2, 1), torch.float64), schedule, noise)
    assert torch.equal(plain, ones)


def test_gradient_through_chain_matches_finite_differences():
    torch.manual_seed(0)
    w = torch.randn(3, 2, 2, 1, dtype=torch.float64)

    def den(z, t, ci, cl):
        return torch.tanh(w[0] * z) + w[1] * ci + w[2] * cl.sum()

    cond = ConditionPair(torch.randn(2, 2, 1, dtype=torch.float64), torch.randn(2, dtype=torch.float64),
                         torch.zeros(2, 2, 1, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    schedule = NoiseSchedule.geometric(3)
    z_T, noise = initial_noise(1, 3, (2, 2, 1), 1.0, torch.float64)
    alpha = torch.rand(2, 2, 1, dtype=torch.float64)
    beta = torch.rand(2, 2, 1, dtype=torch.float64)

    def f(a, b):
        return sample(den, z_T, cond, GuidanceScales(), GuidanceFactors(a, b), schedule, noise).pow(2).sum()

    a = alpha.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(a, beta), a)
    h = 1e-6
    for idx in [(0, 0, 0), (1, 1, 0)]:
        e = torch.zeros_like(alpha)
        e[idx] = h
        fd = (f(alpha + e, beta) - f(alpha - e, beta)) / (2 * h)
        assert float(g[idx]) == pytest.approx(float(fd), rel=1e-6, abs=1e-9)
