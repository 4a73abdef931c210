"""Reverse-process integrators: ancestral DDPM, DDIM, and Euler-Maruyama.

Samplers walk 1-based diffusion times t in [0, T] (or continuous t in (0, 1]
for the SDE sampler); time 0 is clean data. The denoiser itself consumes the
0-based model timestep ``t - 1`` that training used. The model is any callable
``model(x_t, t_batch, cond) -> eps_hat`` where ``t_batch`` is a long tensor of
per-sample 0-based timesteps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import torch
from torch import Tensor

from .core import cfg_combine, classifier_guided_epsilon, eps_to_score, posterior_mean
from .schedule import NoiseSchedule, alpha_bar_at_time, alpha_bar_continuous, beta_sde

__all__ = [
    "GuidanceMode",
    "GuidanceSpec",
    "SamplerFamily",
    "SamplerSpec",
    "ancestral_step",
    "ddim_step",
    "em_step",
    "ddim_time_grid",
    "run_sampler",
]


class GuidanceMode(str, Enum):
    NONE = "none"
    CLASSIFIER_FREE = "classifier_free"
    CLASSIFIER = "classifier"


@dataclass(frozen=True)
class GuidanceSpec:
    mode: GuidanceMode = GuidanceMode.NONE
    scale: float = 1.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")


class SamplerFamily(str, Enum):
    ANCESTRAL = "ancestral"
    EULER_MARUYAMA = "euler_maruyama"
    DDIM = "ddim"


@dataclass(frozen=True)
class SamplerSpec:
    family: SamplerFamily = SamplerFamily.ANCESTRAL
    num_steps: int = 1000
    eta: float = 0.0  # DDIM only
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


def ancestral_step(
    x_t: Tensor, t: int, eps_hat: Tensor, sched: NoiseSchedule, noise: Tensor
) -> Tensor:
    """One DDPM reverse transition from time t to t-1; t must be >= 1.

    The final transition (t = 1) is deterministic: its posterior variance is
    zero and the supplied noise is ignored.
    """
    if t < 1:
        raise ValueError("ancestral_step requires t >= 1")
    if noise.shape != x_t.shape:
        raise ValueError("ancestral_step: noise shape mismatch")
    mean = posterior_mean(x_t, eps_hat, t, sched)
    if t == 1:
        return mean
    sigma = float(sched.posterior_variances[t - 1]) ** 0.5
    return mean + sigma * noise


def ddim_step(
    x_t: Tensor,
    t: int,
    t_prev: int,
    eps_hat: Tensor,
    eta: float,
    sched: NoiseSchedule,
    noise: Optional[Tensor] = None,
) -> Tensor:
    """One DDIM update from diffusion time t down to t_prev (t_prev may be 0,
    meaning a full denoise to the data manifold). eta = 0 is deterministic."""
    if not 0 <= t_prev < t <= sched.num_steps:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    abar = alpha_bar_at_time(sched, t)
    abar_prev = alpha_bar_at_time(sched, t_prev)
    x0_pred = (x_t - (1.0 - abar) ** 0.5 * eps_hat) / abar**0.5
    sigma = 0.0
    if eta > 0.0:
        sigma = (
            eta
            * ((1.0 - abar_prev) / (1.0 - abar)) ** 0.5
            * (1.0 - abar / abar_prev) ** 0.5
        )
    out = abar_prev**0.5 * x0_pred + max(1.0 - abar_prev - sigma**2, 0.0) ** 0.5 * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise tensor")
        out = out + sigma * noise
    return out


def em_step(
    x_t: Tensor,
    t_continuous: float,
    eps_hat: Tensor,
    sched: NoiseSchedule,
    dt: float,
    noise: Tensor,
) -> Tensor:
    """One reverse-time Euler-Maruyama step of the VP-SDE.

    Drift f = -1/2 beta(t) x, diffusion g = sqrt(beta(t)), score from the
    epsilon-to-score identity at the interpolated alpha_bar.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if t_continuous - dt < -1e-12:
        raise ValueError("em_step would integrate past t = 0")
    if noise.shape != x_t.shape:
        raise ValueError("em_step: noise shape mismatch")
    beta = beta_sde(sched, t_continuous)
    abar = alpha_bar_continuous(sched, t_continuous)
    score = eps_to_score(eps_hat, abar)
    drift = -0.5 * beta * x_t - beta * score
    return x_t - drift * dt + (beta * dt) ** 0.5 * noise


def ddim_time_grid(num_total: int, num_steps: int) -> list[int]:
    """Evenly spaced, strictly decreasing diffusion times from T to 0 inclusive."""
    if num_steps > num_total:
        raise ValueError("num_steps cannot exceed the schedule length")
    grid = [round(num_total * (1.0 - i / num_steps)) for i in range(num_steps + 1)]
    if any(a <= b for a, b in zip(grid, grid[1:])):
        raise ValueError("degenerate DDIM time grid; reduce num_steps")
    return grid


Model = Callable[[Tensor, Tensor, object], Tensor]


def run_sampler(
    model: Model,
    spec: SamplerSpec,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    cond=None,
    classifier_grad_fn: Optional[Callable[[Tensor, Tensor], Tensor]] = None,
    device="cpu",
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Draw samples by iterating the spec's step rule from x_T ~ N(0, I).

    Classifier-free guidance evaluates the model twice per step (conditional
    and null-conditional); all other modes evaluate it once. The output is
    clamped to [-1, 1]. Deterministic given ``spec.seed``.
    """
    T = sched.num_steps
    if spec.num_steps > T:
        raise ValueError(f"num_steps {spec.num_steps} exceeds schedule length {T}")
    if spec.family is SamplerFamily.ANCESTRAL and spec.num_steps != T:
        raise ValueError("ancestral sampling requires num_steps == schedule length")
    if spec.guidance.mode is GuidanceMode.CLASSIFIER and classifier_grad_fn is None:
        raise ValueError("classifier guidance requires classifier_grad_fn")

    gen = torch.Generator(device=device).manual_seed(spec.seed)
    x = torch.randn(shape, generator=gen, device=device, dtype=dtype)

    def predict(x_t: Tensor, model_t: int) -> Tensor:
        t_batch = torch.full((shape[0],), model_t, dtype=torch.long, device=device)
        if spec.guidance.mode is GuidanceMode.CLASSIFIER_FREE:
            eps_c = model(x_t, t_batch, cond)
            eps_u = model(x_t, t_batch, None)
            return cfg_combine(eps_u, eps_c, spec.guidance.scale)
        eps = model(x_t, t_batch, cond)
        if spec.guidance.mode is GuidanceMode.CLASSIFIER:
            grad = classifier_grad_fn(x_t, t_batch)
            eps = classifier_guided_epsilon(
                eps, grad, spec.guidance.scale, model_t, sched
            )
        return eps

    if spec.family is SamplerFamily.ANCESTRAL:
        for t in range(T, 0, -1):
            eps = predict(x, t - 1)
            noise = torch.randn(shape, generator=gen, device=device, dtype=dtype)
            x = ancestral_step(x, t, eps, sched, noise)
    elif spec.family is SamplerFamily.DDIM:
        grid = ddim_time_grid(T, spec.num_steps)
        for t, t_prev in zip(grid, grid[1:]):
            eps = predict(x, t - 1)
            noise = None
            if spec.eta > 0.0:
                noise = torch.randn(shape, generator=gen, device=device, dtype=dtype)
            x = ddim_step(x, t, t_prev, eps, spec.eta, sched, noise)
    else:  # Euler-Maruyama
        dt = 1.0 / spec.num_steps
        for i in range(spec.num_steps, 0, -1):
            t_cont = i * dt
            model_t = max(round(t_cont * T) - 1, 0)
            eps = predict(x, model_t)
            if i == 1:
                noise = torch.zeros(shape, device=device, dtype=dtype)
            else:
                noise = torch.randn(shape, generator=gen, device=device, dtype=dtype)
            x = em_step(x, t_cont, eps, sched, dt, noise)

    return x.clamp(-1.0, 1.0)
