import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mcsynth.diffusion import (
    NonFiniteError,
    ScheduleError,
    build_schedule,
    posterior_coefficients,
    posterior_params,
    q_sample,
    reverse_sample_loop,
)


def bayes_posterior_1d(x0, xt, abar_prev, beta):
    """Condition x_{t-1} ~ N(sqrt(abar_prev) x0, 1-abar_prev) on
    x_t | x_{t-1} ~ N(sqrt(1-beta) x_{t-1}, beta) by completing the square."""
    prior_mean, prior_var = math.sqrt(abar_prev) * x0, 1.0 - abar_prev
    a = math.sqrt(1.0 - beta)
    if prior_var == 0.0:
        return prior_mean, 0.0
    precision = 1.0 / prior_var + a * a / beta
    var = 1.0 / precision
    mean = var * (prior_mean / prior_var + a * xt / beta)
    return mean, var


# --- schedule ---------------------------------------------------------------

def test_schedule_terminal_matches_direct_product():
    s = build_schedule(4, 0.1, 20.0)
    prod = 1.0
    for t in range(1, 5):
        rate = 0.1 / 4 + 19.9 * (2 * t - 1) / (2 * 16)
        prod *= math.exp(-rate)
    assert float(s.alpha_bar[-1]) == pytest.approx(prod, abs=1e-12)
    assert float(s.alpha_bar[-1]) == pytest.approx(math.exp(-10.05), abs=1e-9)
    assert float(s.alpha_bar[-1]) < 1e-4


def test_schedule_single_step():
    s = build_schedule(1, 0.1, 0.2)
    assert float(s.beta[0]) == pytest.approx(1 - math.exp(-0.15), abs=1e-12)
    assert float(s.beta[0]) == pytest.approx(0.1393, abs=1e-4)


def test_schedule_near_uniform():
    eps = 1e-9
    s = build_schedule(4, 0.1, 0.1 + eps)
    assert torch.allclose(s.beta, torch.full((4,), 1 - math.exp(-0.025), dtype=torch.float64), atol=1e-9)


@pytest.mark.parametrize("args", [(0, 0.1, 20), (4, 0.0, 20), (4, 1.0, 1.0), (4, 2.0, 1.0), (4, -0.1, 1.0)])
def test_schedule_invalid(args):
    with pytest.raises(ScheduleError):
        build_schedule(*args)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 200), bmin=st.floats(1e-3, 5.0), span=st.floats(1e-3, 40.0))
def test_schedule_invariants(T, bmin, span):
    s = build_schedule(T, bmin, bmin + span)
    assert torch.all((s.beta > 0) & (s.beta < 1))
    if T > 1:
        assert torch.all(s.beta[1:] > s.beta[:-1])
        assert torch.all(s.alpha_bar[1:] < s.alpha_bar[:-1])
    assert torch.allclose(s.alpha, 1 - s.beta, atol=1e-15)
    assert torch.allclose(s.alpha_bar, torch.cumprod(s.alpha, 0), rtol=1e-12)
    if bmin + span / 2 > math.log(1e4):
        assert float(s.alpha_bar[-1]) < 1e-4


def test_marginal_equals_composed_transitions():
    # compose Gaussian transitions x_t = a x_{t-1} + b eps symbolically
    s = build_schedule(4)
    mean_coef, var = 1.0, 0.0
    for t in range(1, 5):
        b = float(s.beta[t - 1])
        mean_coef *= math.sqrt(1 - b)
        var = (1 - b) * var + b
        assert mean_coef == pytest.approx(math.sqrt(float(s.alpha_bar[t - 1])), abs=1e-10)
        assert var == pytest.approx(1 - float(s.alpha_bar[t - 1]), abs=1e-10)


# --- forward process -----------------------------------------------------------

def test_q_sample_zero_noise():
    s = build_schedule(4)
    x0 = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    for t in range(1, 5):
        out = q_sample(x0, t, torch.zeros_like(x0), s)
        assert torch.allclose(out, math.sqrt(float(s.alpha_bar[t - 1])) * x0)


def test_q_sample_terminal_is_noise():
    s = build_schedule(4)
    x0 = torch.ones(1, 1, 8, 8, dtype=torch.float64)
    noise = torch.randn_like(x0)
    assert torch.allclose(q_sample(x0, 4, noise, s), noise, atol=1e-2)


@pytest.mark.parametrize("t", [1, 2, 3, 4])
def test_q_sample_monte_carlo(t):
    s = build_schedule(4)
    n = 10_000
    g = torch.Generator().manual_seed(t)
    x0 = torch.ones(n, dtype=torch.float64)
    out = q_sample(x0, t, torch.randn(n, generator=g, dtype=torch.float64), s).numpy()
    mu, sd = math.sqrt(float(s.alpha_bar[t - 1])), math.sqrt(float(s.one_minus_alpha_bar[t - 1]))
    assert abs(out.mean() - mu) < 3 * sd / math.sqrt(n)
    # standard error of the sample std for Gaussian data: sd / sqrt(2(n-1))
    assert abs(out.std(ddof=1) - sd) < 3 * sd / math.sqrt(2 * (n - 1))


def test_step_out_of_range():
    s = build_schedule(4)
    x = torch.zeros(1, 1, 2, 2)
    for bad in (0, 5, torch.tensor([1, 5])):
        with pytest.raises(ScheduleError):
            q_sample(x, bad, x, s)
        with pytest.raises(ScheduleError):
            posterior_params(x, x, bad, s)


# --- posterior -------------------------------------------------------------------

def test_posterior_final_step_collapses():
    s = build_schedule(4)
    x0_hat = torch.randn(3, 1, 5, 5)
    xt = torch.randn(3, 1, 5, 5)
    p = posterior_params(x0_hat, xt, 1, s)
    assert float(p.variance) == 0.0
    assert torch.equal(p.mean, x0_hat)


def test_posterior_matches_bayes_oracle():
    s = build_schedule(4)
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = int(rng.integers(1, 5))
        x0, xt = rng.normal(size=2) * 2
        p = posterior_params(torch.tensor([[[[x0]]]], dtype=torch.float64),
                             torch.tensor([[[[xt]]]], dtype=torch.float64), t, s)
        mean, var = bayes_posterior_1d(x0, xt, float(s.alpha_bar_prev[t - 1]), float(s.beta[t - 1]))
        assert float(p.mean) == pytest.approx(mean, abs=1e-8)
        assert float(p.variance) == pytest.approx(var, abs=1e-8)


def test_posterior_coefficient_sum():
    # c_x0 + c_xt -> 1 as beta -> 0 (x0_hat = x_t leaves x_t roughly fixed)
    s = build_schedule(8, 1e-4, 2e-4)
    like = torch.zeros(1, dtype=torch.float64)
    for t in range(2, 9):
        c0, ct, _ = posterior_coefficients(t, s, like)
        direct = (math.sqrt(float(s.alpha_bar_prev[t - 1])) * float(s.beta[t - 1])
                  + math.sqrt(float(s.alpha[t - 1])) * (1 - float(s.alpha_bar_prev[t - 1]))) / float(
            s.one_minus_alpha_bar[t - 1])
        assert float(c0 + ct) == pytest.approx(direct, abs=1e-12)
        assert float(c0 + ct) == pytest.approx(1.0, abs=1e-3)


def test_posterior_per_element_steps():
    s = build_schedule(4)
    x0_hat = torch.randn(4, 1, 3, 3, dtype=torch.float64)
    xt = torch.randn(4, 1, 3, 3, dtype=torch.float64)
    t = torch.tensor([1, 2, 3, 4])
    p = posterior_params(x0_hat, xt, t, s)
    for i in range(4):
        q = posterior_params(x0_hat[i:i + 1], xt[i:i + 1], int(t[i]), s)
        assert torch.allclose(p.mean[i:i + 1], q.mean)
        assert float(p.variance[i]) == float(q.variance)


# --- sampling loop --------------------------------------------------------------

def test_constant_denoiser_gives_constant():
    s = build_schedule(4)
    c = 0.37
    y = torch.zeros(2, 2, 8, 8)
    out = reverse_sample_loop(lambda x, y, z, t: torch.full_like(x, c), y, s, rng_seed=0, z_dim=4)
    assert torch.equal(out, torch.full_like(out, c))


def test_single_step_loop():
    s = build_schedule(1, 0.1, 20.0)
    calls = []
    target = torch.randn(1, 1, 4, 4)

    def den(x, y, z, t):
        calls.append(int(t[0]))
        return target

    out = reverse_sample_loop(den, torch.zeros(1, 2, 4, 4), s, rng_seed=3)
    assert calls == [1]
    assert torch.equal(out, target)


def test_loop_deterministic_and_fresh_latents():
    s = build_schedule(4)
    seen = []

    def den(x, y, z, t):
        seen.append(z.clone())
        return torch.tanh(x + z.mean())

    y = torch.zeros(2, 2, 8, 8)
    a = reverse_sample_loop(den, y, s, rng_seed=11, z_dim=3)
    b = reverse_sample_loop(den, y, s, rng_seed=11, z_dim=3)
    assert torch.equal(a, b)
    assert not torch.equal(seen[0], seen[1])
    c = reverse_sample_loop(den, y, s, rng_seed=12, z_dim=3)
    assert not torch.equal(a, c)


def test_oracle_denoiser_reconstructs_truth():
    s = build_schedule(4)
    x0 = torch.rand(2, 1, 8, 8) * 2 - 1
    out = reverse_sample_loop(lambda x, y, z, t: x0, torch.zeros(2, 2, 8, 8), s, rng_seed=5)
    assert torch.equal(out, x0)


def test_loop_detects_non_finite():
    s = build_schedule(4)
    with pytest.raises(NonFiniteError, match="t=4"):
        reverse_sample_loop(lambda x, y, z, t: x * float("nan"), torch.zeros(1, 2, 4, 4), s, 0)
