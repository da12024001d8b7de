"""Noise schedule, closed-form forward diffusion, and DDPM/DDIM reverse steps.

All schedule arithmetic runs in float64 and is cast to the latent dtype at the
boundary, so a T=1000 cumulative product does not drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, ParameterError

DEFAULT_T = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their cumulative products, 1-indexed by timestep.

    ``beta[t - 1]`` and ``alpha_bar[t - 1]`` belong to timestep t in 1..T.
    """

    T: int
    beta: np.ndarray       # float64, length T
    alpha_bar: np.ndarray  # float64, length T

    def abar(self, t: int) -> float:
        """Cumulative product at timestep t, with abar(0) defined as 1."""
        if not 0 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")
        return float(self.beta[t - 1])

    def metadata(self) -> dict:
        return {
            "T": self.T,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
            "kind": "linear",
        }


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    kind: str = "linear",
) -> NoiseSchedule:
    """Build a linear beta schedule with exact float64 cumulative products."""
    if kind != "linear":
        raise ParameterError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def _check_t(t, T: int) -> None:
    ts = torch.as_tensor(t)
    if bool((ts < 1).any()) or bool((ts > T).any()):
        raise ContractError(f"timestep {t} outside [1, {T}]")


def forward_diffuse(
    z0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Noise a clean latent to timestep t: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``t`` is an int or an integer tensor with one entry per leading batch item.
    """
    if eps.shape != z0.shape:
        raise ContractError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    _check_t(t, s.T)
    if isinstance(t, int):
        abar = s.abar(t)
        return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
    idx = torch.as_tensor(t, dtype=torch.long) - 1
    abar = torch.from_numpy(s.alpha_bar)[idx]
    shape = (-1,) + (1,) * (z0.dim() - 1)
    a = abar.sqrt().reshape(shape).to(z0.dtype)
    b = (1.0 - abar).sqrt().reshape(shape).to(z0.dtype)
    return a * z0 + b * eps


def reverse_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    s: NoiseSchedule,
    sampler: str = "ddim",
    eta: float = 0.0,
    rng: torch.Generator | None = None,
    t_prev: int | None = None,
) -> torch.Tensor:
    """One reverse update from timestep t to t_prev (default t - 1).

    ``ddpm`` draws from the fixed-small posterior; ``ddim`` with eta=0 is the
    deterministic update. Non-adjacent t_prev implements strided sampling via
    the effective per-stride alpha.
    """
    if sampler not in ("ddpm", "ddim"):
        raise ParameterError(f"unknown sampler {sampler!r}")
    if eps_hat.shape != z_t.shape:
        raise ContractError(
            f"eps_hat shape {tuple(eps_hat.shape)} != z_t shape {tuple(z_t.shape)}"
        )
    _check_t(t, s.T)
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ContractError(f"t_prev {t_prev} must lie in [0, {t})")

    abar_t = s.abar(t)
    abar_p = s.abar(t_prev)

    if sampler == "ddim":
        sigma = eta * np.sqrt((1.0 - abar_p) / (1.0 - abar_t)) * np.sqrt(
            1.0 - abar_t / abar_p
        )
        z0_hat = (z_t - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
        out = np.sqrt(abar_p) * z0_hat
        out = out + np.sqrt(max(1.0 - abar_p - sigma**2, 0.0)) * eps_hat
        if sigma > 0.0:
            if rng is None:
                raise ContractError("ddim with eta > 0 requires an rng")
            noise = torch.empty_like(z_t).normal_(generator=rng)
            out = out + sigma * noise
        return out

    # ddpm fixed-small posterior; alpha_eff reduces to alpha_t for t_prev = t-1
    alpha_eff = abar_t / abar_p
    beta_eff = 1.0 - alpha_eff
    mean = (z_t - beta_eff / np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(alpha_eff)
    if t_prev == 0:
        return mean
    if rng is None:
        raise ContractError("ddpm requires an rng")
    var = (1.0 - abar_p) / (1.0 - abar_t) * beta_eff
    noise = torch.empty_like(z_t).normal_(generator=rng)
    return mean + np.sqrt(var) * noise


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Decreasing timestep subsequence starting at T, of length min(steps, T)."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    steps = min(steps, T)
    if steps == 1:
        return [T]
    ts = np.unique(np.linspace(1, T, steps).round().astype(int))
    return [int(t) for t in ts[::-1]]
