"""Discrete diffusion noise schedule, forward noising, and deterministic sampling.

Convention: integer timesteps t in [0, T], alpha_bar[0] = 1 (clean data),
alpha_bar strictly decreasing whenever any beta is positive. The sampler is
deterministic DDIM (eta = 0), which keeps regression tests bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, OrderingError, ParameterError, ShapeError

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-product noise schedule plus the inference step ladder."""

    T: int
    alpha_bar: np.ndarray  # length T+1, float64, alpha_bar[0] == 1
    sampling_steps: int
    step_indices: tuple[int, ...]  # strictly decreasing subsequence of [1, T]
    beta_start: float = 0.0
    beta_end: float = 0.0
    kind: str = "linear"

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ParameterError(f"timestep t={t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])


def build_schedule(
    T: int,
    beta_start: float,
    beta_end: float,
    sampling_steps: int = 50,
    kind: str = "linear",
) -> NoiseSchedule:
    """Build a linear-beta schedule with an evenly spaced sampling ladder.

    alpha_bar[t] = prod_{s<=t} (1 - beta_s) with beta linearly spaced over
    s = 1..T. Step indices are evenly spaced over [1, T], largest first
    (round-down spacing), length ``sampling_steps``.
    """
    if not isinstance(T, int) or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not isinstance(sampling_steps, int) or sampling_steps < 1:
        raise ParameterError(f"sampling_steps must be a positive integer, got {sampling_steps!r}")
    if sampling_steps > T:
        raise ParameterError(f"sampling_steps={sampling_steps} exceeds T={T}")
    if not 0.0 <= beta_start <= beta_end:
        raise ParameterError(f"beta_start={beta_start} must satisfy 0 <= beta_start <= beta_end")
    if beta_end >= 1.0:
        raise ParameterError(f"beta_end={beta_end} must be < 1")
    if kind not in SCHEDULE_KINDS:
        raise ParameterError(f"kind={kind!r} not supported (have {SCHEDULE_KINDS})")

    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)

    # Largest timestep first; floor spacing keeps indices unique for K <= T.
    step_indices = tuple(T - (i * T) // sampling_steps for i in range(sampling_steps))
    return NoiseSchedule(
        T=T,
        alpha_bar=alpha_bar,
        sampling_steps=sampling_steps,
        step_indices=step_indices,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        kind=kind,
    )


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def forward_noise(z0: torch.Tensor, t: int, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    Returns float64: near t = T the inverse update amplifies rounding by
    1/sqrt(abar_t), so float32 storage between forward_noise and ddim_step
    would break exact inversion.
    """
    _check_same_shape(z0, eps, "forward_noise(z0, eps)")
    abar = s.abar(t)
    return math.sqrt(abar) * z0.to(torch.float64) + math.sqrt(1.0 - abar) * eps.to(torch.float64)


def sigma_t(t: int, s: NoiseSchedule) -> float:
    """sigma_t = sqrt((1 - abar_t) / abar_t); 0 exactly when abar_t = 1."""
    abar = s.abar(t)
    if abar <= 0.0:
        raise DomainError(f"alpha_bar[{t}] = {abar}; sigma_t undefined (schedule misconfiguration)")
    return math.sqrt((1.0 - abar) / abar)


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    s: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic DDIM update from t to t_prev (eta = 0).

    Algebraically: zhat0 = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t), then
    sqrt(abar_prev) zhat0 + sqrt(1-abar_prev) eps. Computed in ratio form so
    that abar_t == abar_prev is an exact fixed point.
    """
    if t_prev >= t:
        raise OrderingError(f"ddim_step requires t > t_prev, got t={t}, t_prev={t_prev}")
    _check_same_shape(z_t, eps_hat, "ddim_step(z_t, eps_hat)")
    abar_t = s.abar(t)
    abar_prev = s.abar(t_prev)
    if abar_t <= 0.0:
        raise DomainError(f"alpha_bar[{t}] = {abar_t}; cannot invert forward noising")
    c1 = math.sqrt(abar_prev / abar_t)
    c2 = math.sqrt(1.0 - abar_prev) - c1 * math.sqrt(1.0 - abar_t)
    return c1 * z_t.to(torch.float64) + c2 * eps_hat.to(torch.float64)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance: eps_uncond + scale * (eps_cond - eps_uncond).

    Evaluated in float64 as (1 - scale) * uncond + scale * cond, which is the
    same affine map with exact endpoints at scale 0 and 1.
    """
    _check_same_shape(eps_uncond, eps_cond, "cfg_combine(eps_uncond, eps_cond)")
    u = eps_uncond.to(torch.float64)
    c = eps_cond.to(torch.float64)
    return (1.0 - scale) * u + scale * c
