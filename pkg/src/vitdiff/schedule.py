"""Noise schedules for the diffusion forward/reverse processes.

All schedule arrays are precomputed in float64 at construction time and cast
down at the point of use; this keeps the length-1000 cumulative products free
of single-precision drift.

Index conventions used throughout the package:

* Array index ``i`` is 0-based: ``betas[i]`` is the variance of the (i+1)-th
  forward transition. Training draws timesteps ``t`` in ``[0, T)`` which index
  these arrays directly.
* Samplers walk a 1-based "diffusion time" ``t`` in ``[0, T]`` where time
  ``t`` corresponds to array index ``t - 1`` and time 0 means clean data
  (``alpha_bar = 1``). See :func:`alpha_bar_at_time`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "make_cosine_schedule",
    "alpha_bar_at_time",
    "beta_sde",
    "alpha_bar_continuous",
]

COSINE_BETA_CLIP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable container for a discrete variance schedule and its derived arrays."""

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray
    kind: str = field(default="linear")

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        for name in ("betas", "alphas", "alpha_bars", "posterior_variances"):
            arr = getattr(self, name)
            if arr.shape != (self.num_steps,):
                raise ValueError(f"{name} must have shape ({self.num_steps},)")
            arr.setflags(write=False)


def _derive(betas: np.ndarray, kind: str) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("all betas must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    # q(x_{t-1} | x_t, x_0) variance; the first transition (array index 0) is
    # degenerate with alpha_bar_prev = 1, giving variance 0.
    prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior = (1.0 - prev) / (1.0 - alpha_bars) * betas
    return NoiseSchedule(
        num_steps=len(betas),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_variances=posterior,
        kind=kind,
    )


def make_linear_schedule(
    num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return _derive(betas, kind="linear")


def make_cosine_schedule(num_steps: int, offset: float = 0.008) -> NoiseSchedule:
    """Cosine-squared alpha_bar schedule with betas clipped to <= 0.999."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if offset <= 0.0:
        raise ValueError("offset must be > 0")
    grid = np.arange(num_steps + 1, dtype=np.float64) / num_steps
    abar = np.cos((grid + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    abar /= abar[0]
    betas = 1.0 - abar[1:] / abar[:-1]
    betas = np.clip(betas, None, COSINE_BETA_CLIP)
    return _derive(betas, kind="cosine")


def alpha_bar_at_time(sched: NoiseSchedule, t: int) -> float:
    """Cumulative alpha at 1-based diffusion time t in [0, T]; time 0 is clean data."""
    if not 0 <= t <= sched.num_steps:
        raise ValueError(f"diffusion time {t} outside [0, {sched.num_steps}]")
    return 1.0 if t == 0 else float(sched.alpha_bars[t - 1])


def _frac_index(sched: NoiseSchedule, t: float) -> float:
    # map continuous time t in (0, 1] onto the fractional array index t*T - 1
    return min(max(t * sched.num_steps - 1.0, 0.0), sched.num_steps - 1.0)


def beta_sde(sched: NoiseSchedule, t: float) -> float:
    """Instantaneous VP-SDE rate at continuous time t in (0, 1].

    Linear interpolation of the discrete betas, scaled by T so that one Euler
    step of size dt = 1/T injects the same variance as the matching discrete
    forward transition.
    """
    if not 0.0 < t <= 1.0:
        raise ValueError("continuous time must lie in (0, 1]")
    u = _frac_index(sched, t)
    lo = int(math.floor(u))
    hi = min(lo + 1, sched.num_steps - 1)
    w = u - lo
    return sched.num_steps * float((1.0 - w) * sched.betas[lo] + w * sched.betas[hi])


def alpha_bar_continuous(sched: NoiseSchedule, t: float) -> float:
    """Interpolated cumulative alpha at continuous time t in [0, 1]; t=0 gives 1."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("continuous time must lie in [0, 1]")
    u = t * sched.num_steps - 1.0
    if u <= 0.0:
        # blend between clean data (abar=1) and the first grid point
        return float(1.0 + (u + 1.0) * (sched.alpha_bars[0] - 1.0)) if u > -1.0 else 1.0
    lo = int(math.floor(u))
    hi = min(lo + 1, sched.num_steps - 1)
    w = u - lo
    return float((1.0 - w) * sched.alpha_bars[lo] + w * sched.alpha_bars[hi])
