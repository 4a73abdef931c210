"""Forward-process sampling, the epsilon objective, and guidance arithmetic.

Images are plain tensors of shape (B, C, H, W) with values nominally in
[-1, 1]; noise tensors share the image shape. Schedule coefficients are
gathered from the float64 arrays of :class:`~vitdiff.schedule.NoiseSchedule`
and cast to the dtype of the tensor they scale.
"""
from __future__ import annotations

import torch
from torch import Tensor

from .schedule import NoiseSchedule

__all__ = [
    "q_sample",
    "epsilon_loss",
    "posterior_mean",
    "cfg_combine",
    "classifier_guided_epsilon",
    "eps_to_score",
]


def _check_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _gather(values, t: Tensor, like: Tensor) -> Tensor:
    """Index a float64 schedule array with a batch of timesteps and reshape
    to broadcast over ``like``."""
    coeff = torch.from_numpy(values[t.cpu().numpy()]).to(like.device)
    return coeff.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: Tensor, t: Tensor, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Diffuse clean data to timestep t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is a 0-based per-sample timestep batch in [0, T).
    """
    _check_same_shape(x0, eps, "q_sample")
    t = torch.as_tensor(t, device=x0.device).reshape(-1)
    if t.numel() != x0.shape[0]:
        raise ValueError("q_sample: need one timestep per sample")
    if bool((t < 0).any()) or bool((t >= sched.num_steps).any()):
        raise ValueError(f"q_sample: timesteps must lie in [0, {sched.num_steps})")
    abar = _gather(sched.alpha_bars, t, x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def epsilon_loss(eps_hat: Tensor, eps: Tensor) -> Tensor:
    """Mean squared error over all elements of the noise prediction."""
    _check_same_shape(eps_hat, eps, "epsilon_loss")
    return torch.mean((eps_hat - eps) ** 2)


def posterior_mean(x_t: Tensor, eps_hat: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Reverse-transition mean at 1-based diffusion time t in [1, T].

    mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    """
    _check_same_shape(x_t, eps_hat, "posterior_mean")
    if not 1 <= t <= sched.num_steps:
        raise ValueError(f"posterior_mean: time {t} outside [1, {sched.num_steps}]")
    i = t - 1
    beta = float(sched.betas[i])
    alpha = float(sched.alphas[i])
    abar = float(sched.alpha_bars[i])
    coef = beta / (1.0 - abar) ** 0.5
    return (x_t - coef * eps_hat) / alpha**0.5


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, scale: float) -> Tensor:
    """Classifier-free extrapolation: eps_uncond + scale * (eps_cond - eps_uncond)."""
    _check_same_shape(eps_uncond, eps_cond, "cfg_combine")
    if scale < 0:
        raise ValueError("guidance scale must be >= 0")
    if scale == 0.0:
        return eps_uncond
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def classifier_guided_epsilon(
    eps_hat: Tensor,
    classifier_grad: Tensor,
    omega: float,
    t: int,
    sched: NoiseSchedule,
) -> Tensor:
    """Shift the noise prediction by a classifier log-likelihood gradient.

    Implements the epsilon-space form of score guidance,
    eps' = eps_hat - omega * sqrt(1 - abar_t) * grad log p(c | x_t),
    with ``t`` a 0-based model timestep in [0, T).
    """
    _check_same_shape(eps_hat, classifier_grad, "classifier_guided_epsilon")
    if not 0 <= t < sched.num_steps:
        raise ValueError(f"timestep {t} outside [0, {sched.num_steps})")
    if omega == 0.0:
        return eps_hat
    abar = float(sched.alpha_bars[t])
    return eps_hat - omega * (1.0 - abar) ** 0.5 * classifier_grad


def eps_to_score(eps_hat: Tensor, alpha_bar: float) -> Tensor:
    """Convert a noise prediction to a score estimate: -eps_hat / sqrt(1 - abar)."""
    return -eps_hat / (1.0 - alpha_bar) ** 0.5
