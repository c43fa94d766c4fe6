"""Few-step Gaussian diffusion: schedule, forward corruption, posterior, sampler.

Steps are indexed ``t = 1..T`` and ``alpha_bar[0]`` is defined as 1, so the
tensors stored on :class:`NoiseSchedule` are read with ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


class ScheduleError(ValueError):
    """Invalid schedule parameters or step index."""


class NonFiniteError(FloatingPointError):
    """A tensor in the sampling or training path went NaN/inf."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_min: float
    beta_max: float
    beta: torch.Tensor  # [T], float64
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    # 1 - alpha_bar, computed with expm1 so that it matches beta bit-exactly at t=1
    one_minus_alpha_bar: torch.Tensor
    alpha_bar_prev: torch.Tensor  # alpha_bar[t-1] with alpha_bar[0] = 1

    def check_step(self, t: int | torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.T):
            raise ScheduleError(f"step out of range [1, {self.T}]: {t.tolist()}")
        return t

    def gather(self, table: torch.Tensor, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Look up ``table[t-1]`` and reshape for broadcasting against ``like``."""
        t = self.check_step(t)
        vals = table[(t - 1).reshape(-1)].to(dtype=like.dtype, device=like.device)
        if t.dim() == 0:
            return vals.reshape(())
        return vals.reshape(-1, *([1] * (like.dim() - 1)))


def build_schedule(T: int, beta_min: float = 0.1, beta_max: float = 20.0) -> NoiseSchedule:
    """Variance-preserving discretisation of a linear continuous-time beta(s).

    Step t integrates beta(s) over ``[(t-1)/T, t/T]``, giving
    ``beta_t = 1 - exp(-beta_min/T - (beta_max - beta_min)(2t - 1)/(2T^2))``.
    """
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (beta_min > 0 and beta_max > beta_min):
        raise ScheduleError(f"need 0 < beta_min < beta_max, got {beta_min}, {beta_max}")
    T = int(T)
    t = torch.arange(1, T + 1, dtype=torch.float64)
    rate = beta_min / T + (beta_max - beta_min) * (2 * t - 1) / (2 * T**2)
    beta = -torch.expm1(-rate)
    alpha = torch.exp(-rate)
    log_alpha_bar = -torch.cumsum(rate, 0)
    alpha_bar = torch.exp(log_alpha_bar)
    one_minus = -torch.expm1(log_alpha_bar)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    return NoiseSchedule(T, float(beta_min), float(beta_max), beta, alpha, alpha_bar, one_minus, alpha_bar_prev)


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``."""
    a = sched.gather(sched.alpha_bar, t, x0)
    s = sched.gather(sched.one_minus_alpha_bar, t, x0)
    return a.sqrt() * x0 + s.sqrt() * noise


def q_sample_pairs(x0: torch.Tensor, t, sched: NoiseSchedule, generator: torch.Generator | None = None):
    """Draw a consistent pair ``(x_{t-1}, x_t)`` from the forward chain.

    ``x_{t-1}`` comes from the marginal (equal to ``x0`` when t=1) and
    ``x_t`` from one further transition.
    """
    t = sched.check_step(t)
    n1 = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    n2 = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    abar_prev = _gather_prev(sched, t, x0)
    x_prev = abar_prev.sqrt() * x0 + (1 - abar_prev).sqrt() * n1
    beta = sched.gather(sched.beta, t, x0)
    x_t = (1 - beta).sqrt() * x_prev + beta.sqrt() * n2
    return x_prev, x_t


def _gather_prev(sched: NoiseSchedule, t, like):
    return sched.gather(sched.alpha_bar_prev, t, like)


@dataclass
class PosteriorParams:
    mean: torch.Tensor
    variance: torch.Tensor
    log_variance: torch.Tensor

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        return self.mean + self.variance.sqrt() * noise


def posterior_coefficients(t, sched: NoiseSchedule, like: torch.Tensor):
    """Return ``(c_x0, c_xt, variance)`` of ``q(x_{t-1} | x_t, x0)``."""
    beta = sched.gather(sched.beta, t, like)
    alpha = sched.gather(sched.alpha, t, like)
    abar_prev = _gather_prev(sched, t, like)
    denom = sched.gather(sched.one_minus_alpha_bar, t, like)
    one_minus_prev = 1 - abar_prev
    c_x0 = abar_prev.sqrt() * beta / denom
    c_xt = alpha.sqrt() * one_minus_prev / denom
    var = one_minus_prev * beta / denom
    return c_x0, c_xt, var


def posterior_params(x0_hat: torch.Tensor, x_t: torch.Tensor, t, sched: NoiseSchedule) -> PosteriorParams:
    c_x0, c_xt, var = posterior_coefficients(t, sched, x_t)
    mean = c_x0 * x0_hat + c_xt * x_t
    log_var = torch.log(var.clamp(min=1e-20))
    return PosteriorParams(mean, var, log_var)


def _check_finite(x: torch.Tensor, what: str, t: int) -> None:
    if not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise NonFiniteError(f"{what} at step t={t}: {bad}/{x.numel()} non-finite values")


@torch.no_grad()
def reverse_sample_loop(
    denoiser,
    y: torch.Tensor,
    sched: NoiseSchedule,
    rng_seed: int,
    *,
    out_channels: int = 1,
    z_dim: int = 0,
    z_mode: str = "fresh",
) -> torch.Tensor:
    """Run ``x_T ~ N(0, I)`` down to ``x_0`` with ``denoiser(x_t, y, z, t) -> x0_hat``.

    ``z_mode`` is ``"fresh"`` (new latent per step), ``"fixed"`` (one latent
    for the whole chain) or ``"zero"``. The loop owns a private RNG seeded by
    ``rng_seed``; output is deterministic given the seed.
    """
    if z_mode not in ("fresh", "fixed", "zero"):
        raise ValueError(f"unknown z_mode {z_mode!r}")
    gen = torch.Generator().manual_seed(int(rng_seed))
    b, _, h, w = y.shape
    x = torch.randn((b, out_channels, h, w), generator=gen, dtype=y.dtype)

    def draw_z():
        if z_dim <= 0:
            return None
        if z_mode == "zero":
            return torch.zeros((b, z_dim), dtype=y.dtype)
        return torch.randn((b, z_dim), generator=gen, dtype=y.dtype)

    z = draw_z()
    for t in range(sched.T, 0, -1):
        if z_mode == "fresh" and t != sched.T:
            z = draw_z()
        t_vec = torch.full((b,), t, dtype=torch.long)
        x0_hat = denoiser(x, y, z, t_vec)
        if isinstance(x0_hat, tuple):
            x0_hat = x0_hat[0]
        _check_finite(x0_hat, "denoiser output", t)
        post = posterior_params(x0_hat, x, t_vec, sched)
        if t > 1:
            x = post.sample(torch.randn(x.shape, generator=gen, dtype=x.dtype))
        else:
            x = post.mean
        _check_finite(x, "sample", t)
    return x


def terminal_log_alpha_bar(beta_min: float, beta_max: float) -> float:
    """``log alpha_bar_T`` of :func:`build_schedule`; independent of T."""
    return -(beta_min + 0.5 * (beta_max - beta_min))


__all__ = [
    "NoiseSchedule",
    "PosteriorParams",
    "ScheduleError",
    "NonFiniteError",
    "build_schedule",
    "q_sample",
    "q_sample_pairs",
    "posterior_coefficients",
    "posterior_params",
    "reverse_sample_loop",
    "terminal_log_alpha_bar",
]
