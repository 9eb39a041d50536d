"""Variance schedule, forward diffusion and the Gaussian posterior.

Step indices are 1-based: ``t`` runs over ``1..T`` and ``t = 0`` denotes the
clean sample (``x_0``), for which forward diffusion is the identity. Noise is
always passed in by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import DTYPE


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed tables indexed by step, with index 0 meaning ``x_0``.

    ``beta[0] = 0`` and ``alpha_bar[0] = 1`` by convention so that every
    table can be gathered directly with a step tensor.
    """

    T: int
    beta_min: float
    beta_max: float
    beta: torch.Tensor
    alpha: torch.Tensor
    log_alpha_bar: torch.Tensor
    alpha_bar: torch.Tensor
    one_minus_alpha_bar: torch.Tensor

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [(t, self.beta[t].item(), self.alpha[t].item(), self.alpha_bar[t].item())
                for t in range(1, self.T + 1)]

    def to_csv(self) -> str:
        lines = ["t,beta,alpha,alpha_bar"]
        lines += [f"{t},{b!r},{a!r},{ab!r}" for t, b, a, ab in self.rows()]
        return "\n".join(lines) + "\n"


def _from_log_alpha(T: int, beta_min: float, beta_max: float, neg_log_alpha: torch.Tensor) -> DiffusionSchedule:
    zero = torch.zeros(1, dtype=DTYPE)
    neg_log_alpha = torch.cat([zero, neg_log_alpha])
    log_alpha = 0.0 - neg_log_alpha
    # beta = 1 - exp(-x) evaluated without cancellation
    beta = 0.0 - torch.expm1(-neg_log_alpha)
    alpha = 1.0 - beta
    log_alpha_bar = torch.cumsum(log_alpha, dim=0)
    alpha_bar = torch.exp(log_alpha_bar)
    one_minus_alpha_bar = 0.0 - torch.expm1(log_alpha_bar)
    return DiffusionSchedule(T, beta_min, beta_max, beta, alpha, log_alpha_bar, alpha_bar, one_minus_alpha_bar)


def make_variance_schedule(T: int, beta_min: float = 0.1, beta_max: float = 40.0) -> DiffusionSchedule:
    """Discretized variance-preserving SDE schedule.

    ``beta_t = 1 - exp(-beta_min/T - 0.5 (beta_max - beta_min) (2t - 1) / T^2)``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if beta_min < 0 or beta_max < beta_min:
        raise ValueError(f"need beta_max >= beta_min >= 0, got beta_min={beta_min}, beta_max={beta_max}")
    t = torch.arange(1, T + 1, dtype=DTYPE)
    x = beta_min / T + 0.5 * (beta_max - beta_min) * (2 * t - 1) / T**2
    return _from_log_alpha(T, float(beta_min), float(beta_max), x)


def schedule_from_betas(betas) -> DiffusionSchedule:
    """Build a schedule from explicit ``beta_1..beta_T`` values."""
    betas = torch.as_tensor(betas, dtype=DTYPE).reshape(-1)
    if betas.numel() < 1:
        raise ValueError("need at least one beta")
    if ((betas < 0) | (betas >= 1)).any():
        raise ValueError("betas must lie in [0, 1)")
    return _from_log_alpha(betas.numel(), float("nan"), float("nan"), -torch.log1p(-betas))


def _gather(table: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Index ``table`` by ``t`` (int or per-batch tensor) and broadcast to ``like``."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        v = table[t.long()]
        return v.reshape(v.shape + (1,) * (like.dim() - 1))
    return table[int(t)]


def _check_step(t, lo: int, hi: int, what: str) -> None:
    tt = torch.as_tensor(t)
    if (tt < lo).any() or (tt > hi).any():
        raise ValueError(f"{what}: step index out of range [{lo}, {hi}]: {tt.tolist()}")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def diffuse_closed_form(x0: torch.Tensor, t, schedule: DiffusionSchedule, noise: torch.Tensor) -> torch.Tensor:
    """Sample ``q(x_t | x_0)`` as ``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``."""
    _check_same_shape(x0, noise, "diffuse_closed_form")
    _check_step(t, 0, schedule.T, "diffuse_closed_form")
    if not isinstance(t, torch.Tensor) or t.dim() == 0:
        if int(t) == 0:
            return x0
    a = _gather(schedule.alpha_bar, t, x0)
    s = _gather(schedule.one_minus_alpha_bar, t, x0)
    return torch.sqrt(a) * x0 + torch.sqrt(s) * noise


def diffuse_stepwise(x_prev: torch.Tensor, t, schedule: DiffusionSchedule, noise: torch.Tensor) -> torch.Tensor:
    """One forward step ``q(x_t | x_{t-1})``."""
    _check_same_shape(x_prev, noise, "diffuse_stepwise")
    _check_step(t, 1, schedule.T, "diffuse_stepwise")
    a = _gather(schedule.alpha, t, x_prev)
    b = _gather(schedule.beta, t, x_prev)
    return torch.sqrt(a) * x_prev + torch.sqrt(b) * noise


@dataclass
class PosteriorParams:
    mean: torch.Tensor
    variance: torch.Tensor  # scalar, or per-batch broadcastable to mean


def posterior_params(x0: torch.Tensor, xt: torch.Tensor, t, schedule: DiffusionSchedule) -> PosteriorParams:
    """Mean and variance of ``q(x_{t-1} | x_t, x_0)``.

    Where ``1 - abar_t`` is exactly zero (a zero-variance schedule) the chain
    is the identity and the posterior is a point mass at ``x0``.
    """
    _check_same_shape(x0, xt, "posterior_params")
    _check_step(t, 1, schedule.T, "posterior_params")
    t_prev = t - 1
    ab_prev = _gather(schedule.alpha_bar, t_prev, x0)
    omab_prev = _gather(schedule.one_minus_alpha_bar, t_prev, x0)
    omab = _gather(schedule.one_minus_alpha_bar, t, x0)
    beta = _gather(schedule.beta, t, x0)
    alpha = _gather(schedule.alpha, t, x0)
    degenerate = torch.as_tensor(omab) == 0
    denom = torch.where(degenerate, torch.ones_like(torch.as_tensor(omab)), torch.as_tensor(omab))
    c0 = torch.where(degenerate, torch.ones_like(denom), torch.sqrt(torch.as_tensor(ab_prev)) * beta / denom)
    ct = torch.where(degenerate, torch.zeros_like(denom), torch.sqrt(torch.as_tensor(alpha)) * omab_prev / denom)
    var = torch.where(degenerate, torch.zeros_like(denom), omab_prev / denom * beta)
    mean = c0 * x0 + ct * xt
    return PosteriorParams(mean=mean, variance=var)


def posterior_sample(params: PosteriorParams, noise: torch.Tensor) -> torch.Tensor:
    _check_same_shape(params.mean, noise, "posterior_sample")
    var = torch.as_tensor(params.variance)
    if (var < 0).any():
        raise ValueError(f"posterior variance must be nonnegative, got {var.tolist()}")
    return params.mean + torch.sqrt(var) * noise
