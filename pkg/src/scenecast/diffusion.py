"""Variance schedule, forward noising, posterior reverse step and masked L1 loss.

Tables are indexed by the diffusion step t = 0..T with ``alpha_bar[0] = 1``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    beta: np.ndarray        # (T+1,), beta[0] = 0
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.shape[0] - 1

    def digest(self) -> str:
        return hashlib.sha256(self.beta.astype("<f8").tobytes()).hexdigest()[:16]


def schedule_from_betas(betas) -> DiffusionSchedule:
    """Build all tables from beta_1..beta_T."""
    beta = np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta_tilde = np.zeros_like(beta)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return DiffusionSchedule(beta, alpha, alpha_bar, beta_tilde)


def cosine_schedule(T: int, s: float = COSINE_OFFSET, max_beta: float = MAX_BETA) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    betas = [min(1.0 - f(t) / f(t - 1), max_beta) for t in range(1, T + 1)]
    return schedule_from_betas(betas)


def _check_t(t, T):
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ValueError(f"diffusion step outside 1..{T}")


def _table(values: np.ndarray, t, like):
    """Gather ``values[t]`` and broadcast against ``like`` (batch on axis 0)."""
    if torch.is_tensor(like):
        v = torch.as_tensor(values, dtype=like.dtype, device=like.device)[torch.as_tensor(t, device=like.device)]
        return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))
    v = values[np.asarray(t)]
    return np.reshape(v, np.shape(v) + (1,) * (np.ndim(like) - np.ndim(v)))


def q_sample(x0, t, eps, schedule: DiffusionSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps (t per batch item or scalar)."""
    _check_t(t, schedule.T)
    ab = _table(schedule.alpha_bar, t, x0)
    if torch.is_tensor(ab):
        return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps


def posterior_coefficients(t: int, schedule: DiffusionSchedule):
    """(coef on x0_hat, coef on x_t, variance) of q(x_{t-1} | x_t, x0_hat)."""
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    beta_t = schedule.beta[t]
    c0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = math.sqrt(schedule.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0, ct, schedule.beta_tilde[t]


def reverse_step(x_t, x0_hat, t: int, schedule: DiffusionSchedule, noise=None):
    """One ancestral step x_t -> x_{t-1} around the predicted clean sequence.

    Without ``noise`` the posterior mean is returned. At t = 1 the posterior
    collapses onto ``x0_hat`` (alpha_bar_0 = 1 makes the x_t weight and the
    variance vanish), which is returned as is.
    """
    _check_t(t, schedule.T)
    if t == 1:
        return x0_hat
    c0, ct, var = posterior_coefficients(t, schedule)
    mean = c0 * x0_hat + ct * x_t
    if noise is None:
        return mean
    return mean + math.sqrt(var) * noise


def training_loss(prediction, target, presence_mask, n: int):
    """Mean absolute error over output frames n+1..N that are real (mask True).

    prediction/target: (..., J, 3, N); presence_mask: (..., N).
    """
    mask = torch.as_tensor(presence_mask).to(torch.bool).clone()
    mask[..., :n] = False
    keep = mask[..., None, None, :].expand_as(prediction)
    total = keep.sum()
    if total.item() == 0:
        raise ValueError("every output frame is masked; drop this window")
    err = torch.where(keep, (prediction - target).abs(), torch.zeros_like(prediction))
    return err.sum() / total
