"""Gaussian forward process, epsilon-prediction loss and reverse samplers.

Noise levels are indexed ``t = 0..T``: level 0 is clean data (alpha_bar = 1)
and level ``t >= 1`` uses ``beta[t - 1]``. Training draws ``t`` from 1..T.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidRange, InvalidTimestep, NonFinite, ShapeMismatch, TooFewSteps

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray  # float32, length T
    alpha_bar: np.ndarray  # float32, length T

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise InvalidTimestep(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise InvalidTimestep(f"timestep {t} outside [1, {self.T}]")
        return float(self.beta[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor) -> torch.Tensor:
        """Batched lookup for integer level tensor ``t`` (level 0 -> 1)."""
        table = torch.cat([torch.ones(1, dtype=torch.float64),
                           torch.from_numpy(self.alpha_bar.astype(np.float64))])
        return table[t]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 1:
        raise InvalidRange("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta64 = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta64).astype(np.float32)
    return DiffusionSchedule(beta=beta64.astype(np.float32), alpha_bar=alpha_bar)


@dataclass
class NoisyLatent:
    z_tilde: torch.Tensor
    t: int
    eps_true: Optional[torch.Tensor] = None


def q_sample_closed_form(z0: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    """sqrt(ab) * z0 + sqrt(1 - ab) * eps, with ``alpha_bar`` broadcast over leading dims."""
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    ab = torch.as_tensor(alpha_bar, dtype=torch.float64)
    while ab.dim() < z0.dim() and ab.dim() > 0:
        ab = ab.unsqueeze(-1)
    a = ab.sqrt().to(z0.dtype)
    s = (1.0 - ab).sqrt().to(z0.dtype)
    return a * z0 + s * eps


def q_sample(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: DiffusionSchedule) -> NoisyLatent:
    z = q_sample_closed_form(z0, eps, sched.alpha_bar_at(t))
    return NoisyLatent(z_tilde=z, t=t, eps_true=eps)


def q_step(z_prev: torch.Tensor, t: int, sched: DiffusionSchedule,
           generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One forward transition q(z_t | z_{t-1})."""
    b = sched.beta_at(t)
    noise = torch.randn(z_prev.shape, generator=generator, dtype=z_prev.dtype)
    return np.sqrt(1.0 - b) * z_prev + np.sqrt(b) * noise


def denoising_loss(eps_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                   z0: torch.Tensor, sched: DiffusionSchedule,
                   generator: Optional[torch.Generator] = None,
                   t: Optional[torch.Tensor] = None,
                   eps: Optional[torch.Tensor] = None,
                   reduction: str = "mean") -> torch.Tensor:
    """Mean-squared error between true and predicted noise.

    ``eps_fn(z_t, t)`` receives the batched noisy latents and their integer
    levels. ``reduction="sum"`` is used by gradient accumulation.
    """
    batch = z0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (batch,), generator=generator)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample_closed_form(z0, eps, sched.alpha_bar_tensor(t))
    pred = eps_fn(z_t, t)
    if pred.shape != eps.shape:
        raise ShapeMismatch(f"denoiser output {tuple(pred.shape)} vs target {tuple(eps.shape)}")
    loss = F.mse_loss(pred, eps, reduction=reduction)
    if not torch.isfinite(loss):
        raise NonFinite("loss is not finite")
    return loss


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, alpha_bar: float) -> torch.Tensor:
    return (z_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)


def ddpm_step(z_t: NoisyLatent, eps_hat: torch.Tensor, sched: DiffusionSchedule,
              generator: Optional[torch.Generator] = None) -> NoisyLatent:
    """Ancestral update from level t to t - 1 with posterior variance."""
    t = z_t.t
    if not 1 <= t <= sched.T:
        raise InvalidTimestep(f"ddpm_step needs 1 <= t <= T, got {t}")
    if eps_hat.shape != z_t.z_tilde.shape:
        raise ShapeMismatch("eps_hat shape differs from latent")
    beta = sched.beta_at(t)
    ab, ab_prev = sched.alpha_bar_at(t), sched.alpha_bar_at(t - 1)
    mean = (z_t.z_tilde - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if t > 1:
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        mean = mean + np.sqrt(var) * noise
    return NoisyLatent(z_tilde=mean, t=t - 1)


def ddim_step(z: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              sched: DiffusionSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) jump from level t to t_prev."""
    ab, ab_prev = sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev)
    x0 = predict_x0(z, eps_hat, ab)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat


def pndm_transfer(z: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int,
                  sched: DiffusionSchedule) -> torch.Tensor:
    """PNDM transfer function phi(x_t, eps, t, t - delta)."""
    a, a_prev = sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev)
    denom = a * np.sqrt(1.0 - a_prev) + np.sqrt(a * (1.0 - a) * a_prev)
    return np.sqrt(a_prev / a) * z - (a_prev - a) / denom * eps


def sampling_timesteps(sched: DiffusionSchedule, steps: int) -> list[int]:
    """Uniformly strided levels from T down to a small level; the chain then ends at 0."""
    if steps < 1 or steps > sched.T:
        raise InvalidRange(f"steps must be in [1, {sched.T}]")
    return [int(x) for x in (np.arange(steps, 0, -1) * sched.T) // steps]


def ddpm_sample(eps_fn: EpsFn, z_T: torch.Tensor, sched: DiffusionSchedule,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
    state = NoisyLatent(z_T, sched.T)
    while state.t > 0:
        state = ddpm_step(state, eps_fn(state.z_tilde, state.t), sched, generator)
    return state.z_tilde


def ddim_sample(eps_fn: EpsFn, z_T: torch.Tensor, steps: int, sched: DiffusionSchedule) -> torch.Tensor:
    ts = sampling_timesteps(sched, steps)
    z = z_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        z = ddim_step(z, eps_fn(z, t), t, t_prev, sched)
    return z


_AB_COEFFS = (
    (1.0,),
    (3 / 2, -1 / 2),
    (23 / 12, -16 / 12, 5 / 12),
    (55 / 24, -59 / 24, 37 / 24, -9 / 24),
)


def pndm_sample(eps_fn: EpsFn, z_T: torch.Tensor, steps: int, sched: DiffusionSchedule) -> torch.Tensor:
    """Pseudo linear multistep sampler (fourth-order, lower-order warm-up).

    The first step is a plain transfer step (identical to DDIM); orders two
    and three bootstrap the history until the fourth-order Adams-Bashforth
    combination of the last four noise estimates takes over.
    """
    if steps < 4:
        raise TooFewSteps(f"PNDM needs at least 4 steps, got {steps}")
    ts = sampling_timesteps(sched, steps)
    history: list[torch.Tensor] = []
    z = z_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        history.append(eps_fn(z, t))
        history = history[-4:]
        coeffs = _AB_COEFFS[len(history) - 1]
        eps = sum(c * e for c, e in zip(coeffs, reversed(history)))
        z = pndm_transfer(z, eps, t, t_prev, sched)
    return z


SAMPLERS = ("pndm", "ddim", "ddpm")


def sample(name: str, eps_fn: EpsFn, z_T: torch.Tensor, steps: int, sched: DiffusionSchedule,
           generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if name == "pndm":
        return pndm_sample(eps_fn, z_T, steps, sched)
    if name == "ddim":
        return ddim_sample(eps_fn, z_T, steps, sched)
    if name == "ddpm":
        return ddpm_sample(eps_fn, z_T, sched, generator)
    raise ValueError(f"unknown sampler {name!r}")
