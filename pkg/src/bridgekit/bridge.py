"""Latent diffusion Schrödinger bridge with a zero-drift Brownian reference.

With zero drift the bridge between two pinned latents has a closed-form
Gaussian marginal at every step, so training pairs are drawn directly from
that marginal and inference alternates an ε-prediction with a draw from the
bridge posterior between the predicted clean latent and the current iterate.

Time indices run 0..T; index 0 is the complete-shape end, T the partial end.
``sigma2[t]`` is the variance accumulated from the complete end and
``sigma2_b[t]`` the variance still to accumulate toward the partial end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class BridgeSchedule:
    beta: np.ndarray      # beta[t] for t = 1..T (beta[0] unused, 0)
    sigma2: np.ndarray    # cumulative sum of beta up to t
    sigma2_b: np.ndarray  # sum of beta after t

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def sigma(self, t: int) -> float:
        return float(np.sqrt(self.sigma2[t]))


def make_schedule(T: int = 50, beta_max: float = 0.04, beta_min: float | None = None) -> BridgeSchedule:
    """Symmetric triangular schedule: linear from ``beta_min`` to ``beta_max`` at
    the midpoint, then mirrored, so ``beta[t] == beta[T + 1 - t]``.

    ``beta_min`` defaults to ``beta_max / 10``; pass ``beta_min == beta_max`` for
    a constant schedule.
    """
    if T < 2:
        raise ValueError("need at least two steps")
    if beta_max <= 0:
        raise ValueError("beta_max must be positive")
    beta_min = beta_max / 10 if beta_min is None else beta_min
    if beta_min <= 0 or beta_min > beta_max:
        raise ValueError("need 0 < beta_min <= beta_max")
    half = (T + 1) // 2
    rise = np.linspace(beta_min, beta_max, half)
    tail = rise[::-1][T % 2:] if T % 2 else rise[::-1]
    betas = np.concatenate([rise, tail])[:T]
    beta = np.concatenate([[0.0], betas])
    sigma2 = np.cumsum(beta)
    sigma2_b = sigma2[-1] - sigma2
    sigma2_b[-1] = 0.0
    return BridgeSchedule(beta, sigma2, sigma2_b)


def _check_t(t: int, sched: BridgeSchedule) -> None:
    if not 0 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")


def posterior_coeffs(t: int, sched: BridgeSchedule) -> tuple[float, float, float]:
    """(weight on z0, weight on zT, variance) of the bridge marginal at ``t``."""
    _check_t(t, sched)
    s2, sb2 = float(sched.sigma2[t]), float(sched.sigma2_b[t])
    total = s2 + sb2
    if total <= 0:
        raise ValueError("degenerate schedule: zero total variance")
    return sb2 / total, s2 / total, s2 * sb2 / total


def posterior_params(z0, zT, t: int, sched: BridgeSchedule):
    if z0.shape != zT.shape:
        raise ValueError("bridge endpoints must have the same shape")
    a, b, var = posterior_coeffs(t, sched)
    if t == 0:
        return z0.clone() if torch.is_tensor(z0) else np.copy(z0), 0.0
    if t == sched.T:
        return zT.clone() if torch.is_tensor(zT) else np.copy(zT), 0.0
    return a * z0 + b * zT, var


def _normal_like(z, gen):
    if torch.is_tensor(z):
        return torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return gen.standard_normal(np.shape(z))


def sample_zt(z0, zT, t: int, sched: BridgeSchedule, gen):
    """Draw from the bridge marginal. ``gen`` is a torch.Generator for tensors
    or a numpy Generator for arrays."""
    mu, var = posterior_params(z0, zT, t, sched)
    if var == 0.0:
        return mu
    return mu + np.sqrt(var) * _normal_like(z0, gen)


def eps_target(z_t, z0, t: int, sched: BridgeSchedule):
    """Regression target ``(z_t - z0) / sigma_t``."""
    _check_t(t, sched)
    if t == 0:
        raise ValueError("the target is undefined at t=0")
    return (z_t - z0) / sched.sigma(t)


def predict_z0(z_t, eps_hat, t: int, sched: BridgeSchedule):
    _check_t(t, sched)
    if t == 0:
        raise ValueError("cannot invert the target at t=0")
    return z_t - sched.sigma(t) * eps_hat


def inject_stochasticity(zT, scale: float, gen):
    if scale < 0:
        raise ValueError("noise scale must be non-negative")
    if scale == 0:
        return zT
    return zT + scale * _normal_like(zT, gen)


def reverse_coeffs(t_from: int, t_to: int, sched: BridgeSchedule) -> tuple[float, float, float]:
    """(weight on z0_hat, weight on z_{t_from}, variance) of the step posterior."""
    _check_t(t_from, sched)
    _check_t(t_to, sched)
    if not t_to < t_from:
        raise ValueError(f"reverse step must go backward, got {t_from} -> {t_to}")
    s_to = float(sched.sigma2[t_to])
    gap = float(sched.sigma2[t_from]) - s_to
    total = s_to + gap
    return gap / total, s_to / total, s_to * gap / total


def reverse_step(z_t, z0_hat, t_from: int, t_to: int, sched: BridgeSchedule, gen=None):
    """Sample ``z_{t_to}`` from the bridge pinned at ``z0_hat`` (time 0) and
    ``z_t`` (time ``t_from``). ``gen=None`` returns the posterior mean."""
    a, b, var = reverse_coeffs(t_from, t_to, sched)
    if t_to == 0:
        return z0_hat
    mean = a * z0_hat + b * z_t
    if gen is None or var == 0.0:
        return mean
    return mean + np.sqrt(var) * _normal_like(z_t, gen)


def inference_timesteps(n_steps: int, sched: BridgeSchedule) -> list[int]:
    """``n_steps + 1`` strictly decreasing indices from T to 0, spaced evenly in
    accumulated variance."""
    T = sched.T
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}]")
    targets = sched.sigma2[-1] * (1.0 - np.arange(n_steps + 1) / n_steps)
    steps = [T]
    for k in range(1, n_steps):
        t = int(np.argmin(np.abs(sched.sigma2 - targets[k])))
        # leave room for the remaining strictly decreasing steps
        t = min(max(t, n_steps - k), steps[-1] - 1)
        steps.append(t)
    steps.append(0)
    return steps


def sample_completion(denoiser, zT, n_steps: int, sched: BridgeSchedule, gen=None,
                      deterministic: bool = False):
    """Iterate ε-prediction and bridge-posterior steps from ``zT`` down to 0.

    ``denoiser(z_t, t)`` returns the predicted target. Deterministic mode (or
    ``gen=None``) uses posterior means, which makes the sampler a pure
    function of its inputs.
    """
    steps = inference_timesteps(n_steps, sched)
    z = zT
    noise = None if deterministic else gen
    z0_hat = zT
    for t_from, t_to in zip(steps[:-1], steps[1:]):
        z0_hat = predict_z0(z, denoiser(z, t_from), t_from, sched)
        z = reverse_step(z, z0_hat, t_from, t_to, sched, noise)
    return z0_hat


def bridge_loss(eps_hat, target):
    return ((eps_hat - target) ** 2).mean()
