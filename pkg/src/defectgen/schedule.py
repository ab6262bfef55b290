"""Diffusion-process arithmetic: variance schedules, forward noising, DDIM steps.

All functions here are pure; randomness enters only through an explicitly
passed ``torch.Generator`` owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed variance-schedule sequences for a diffusion process.

    ``alpha_bars[t]`` is the cumulative product of ``alphas[:t+1]``.
    ``sigmas[t]`` is the DDIM per-step noise scale for the unit step
    t -> t-1 at the configured ``eta`` (all zero when ``eta == 0``).
    """

    t_train: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    eta: float = 0.0


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly decreasing inference timesteps split into three stages.

    ``stage_boundaries = (b1, b2)`` splits ``steps`` into the free-diffusion
    steps ``steps[:b1]``, the latent-editing steps ``steps[b1:b2]`` and the
    pixel-editing steps ``steps[b2:]``.
    """

    steps: np.ndarray
    stage_boundaries: tuple[int, int]

    @property
    def free_steps(self) -> np.ndarray:
        return self.steps[: self.stage_boundaries[0]]

    @property
    def latent_edit_steps(self) -> np.ndarray:
        return self.steps[self.stage_boundaries[0] : self.stage_boundaries[1]]

    @property
    def pixel_edit_steps(self) -> np.ndarray:
        return self.steps[self.stage_boundaries[1] :]


def make_schedule(
    t_train: int,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    spacing: str = "linear",
    eta: float = 0.0,
) -> NoiseSchedule:
    """Build a linear variance schedule with ``t_train`` training steps."""
    if t_train < 1:
        raise ParameterError(f"t_train must be >= 1, got {t_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if spacing != "linear":
        raise ParameterError(f"unsupported spacing {spacing!r}")

    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)

    # Unit-step DDIM noise scale sigma_t for t -> t-1; sigma_0 uses
    # alpha_bar_{-1} = 1 (the step onto the clean latent).
    ab_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = (
        eta
        * np.sqrt((1.0 - ab_prev) / (1.0 - alpha_bars))
        * np.sqrt(1.0 - alpha_bars / ab_prev)
    )
    return NoiseSchedule(
        t_train=t_train,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        eta=eta,
    )


def q_sample(
    z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Closed-form forward noising: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    if not (0 <= t < sched.t_train):
        raise ParameterError(f"t={t} outside [0, {sched.t_train})")
    if eps.shape != z0.shape:
        raise ParameterError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    ab = float(sched.alpha_bars[t])
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddim_step(
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """One DDIM update from timestep ``t`` down to ``t_prev``.

    ``t_prev == -1`` denotes the final step onto the clean latent
    (alpha_bar treated as 1).  With ``eta == 0`` the update is
    deterministic; the degenerate case alpha_bar_t == alpha_bar_prev is a
    bit-exact no-op.
    """
    if t_prev >= t:
        raise ParameterError(f"t_prev={t_prev} must be < t={t}")
    if not (0 <= t < sched.t_train):
        raise ParameterError(f"t={t} outside [0, {sched.t_train})")
    if eps_pred.shape != z_t.shape:
        raise ParameterError("eps_pred shape mismatch")

    ab_t = float(sched.alpha_bars[t])
    ab_prev = 1.0 if t_prev < 0 else float(sched.alpha_bars[t_prev])

    sigma = 0.0
    if eta > 0.0:
        sigma = (
            eta
            * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
            * np.sqrt(1.0 - ab_t / ab_prev)
        )

    # Algebraically: z0_hat = (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t), then
    # sqrt(ab_prev) z0_hat + sqrt(1 - ab_prev - sigma^2) eps + sigma noise.
    # Written in coefficient form so ab_t == ab_prev cancels exactly.
    c_z = np.sqrt(ab_prev / ab_t)
    c_eps = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) - c_z * np.sqrt(1.0 - ab_t)
    out = c_z * z_t + c_eps * eps_pred
    if sigma > 0.0:
        noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
        out = out + sigma * noise
    return out


def plan_timesteps(t_train: int, t1: int, t2: int, t3: int) -> TimestepPlan:
    """Evenly spaced decreasing timesteps for the three inference stages."""
    if min(t1, t2, t3) < 0:
        raise ParameterError("stage lengths must be non-negative")
    n = t1 + t2 + t3
    if n < 1:
        raise ParameterError("need at least one inference step")
    if n > t_train:
        raise ParameterError(f"{n} steps exceed t_train={t_train}")

    if n == 1:
        steps = np.array([t_train - 1], dtype=np.int64)
    else:
        steps = np.round(np.linspace(t_train - 1, 0, n)).astype(np.int64)
    if not np.all(np.diff(steps) < 0):
        raise ParameterError("planned timesteps are not strictly decreasing")
    return TimestepPlan(steps=steps, stage_boundaries=(t1, t1 + t2))
