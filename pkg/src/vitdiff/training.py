"""Training loop: epsilon-objective steps with AdamW, conditioning dropout,
EMA shadow weights, and deterministic resume from checkpoints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import torch
from torch import Tensor, nn

from .checkpoint import TrainState
from .conditioning import ConditioningBundle, apply_conditioning_dropout
from .core import epsilon_loss, q_sample
from .schedule import NoiseSchedule

__all__ = ["TrainConfig", "TrainingDiverged", "EMA", "ema_update", "Trainer", "train_step"]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.99, 0.999)
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    max_iterations: int = 1000
    grad_clip: Optional[float] = None
    seed: int = 0
    p_drop: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.ema_decay < 1.0 and self.ema_decay not in (0.0, 1.0):
            raise ValueError("ema_decay must lie in [0, 1]")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the iteration index."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


def ema_update(ema: dict[str, Tensor], params: dict[str, Tensor], decay: float):
    """In-place elementwise update: ema <- decay * ema + (1 - decay) * param."""
    if set(ema) != set(params):
        raise ValueError("EMA and parameter tables name different tensors")
    with torch.no_grad():
        for name, shadow in ema.items():
            p = params[name]
            if shadow.shape != p.shape:
                raise ValueError(f"EMA shape mismatch for {name}")
            shadow.mul_(decay).add_(p, alpha=1.0 - decay)
    return ema


class EMA:
    """Shadow copy of the model parameters, never part of the autograd graph."""

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            name: p.detach().clone() for name, p in model.named_parameters()
        }

    def update(self, model: nn.Module):
        ema_update(
            self.shadow, {n: p.detach() for n, p in model.named_parameters()}, self.decay
        )

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.shadow)

    def load_state_dict(self, state: dict[str, Tensor]):
        if set(state) != set(self.shadow):
            raise ValueError("EMA state names do not match the model")
        for name, t in state.items():
            self.shadow[name] = t.clone()

    def copy_to(self, model: nn.Module):
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.shadow[name])


def train_step(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    x0: Tensor,
    cond: Optional[ConditioningBundle],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    generator: torch.Generator,
    iteration: int = 0,
) -> float:
    """One optimization step of the noise-prediction objective.

    Draws per-sample uniform timesteps and standard-normal noise, applies
    conditioning dropout, and updates with decoupled weight decay.
    """
    b = x0.shape[0]
    t = torch.randint(0, sched.num_steps, (b,), generator=generator, device=x0.device)
    eps = torch.randn(x0.shape, generator=generator, device=x0.device, dtype=x0.dtype)
    if cond is not None:
        cond = apply_conditioning_dropout(cond, cfg.p_drop, generator)
    x_t = q_sample(x0, t, eps, sched)
    loss = epsilon_loss(model(x_t, t, cond), eps)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(iteration, value)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return value


class Trainer:
    """Owns the model, optimizer, EMA shadow, RNG, and iteration counter."""

    def __init__(
        self,
        model: nn.Module,
        sched: NoiseSchedule,
        cfg: TrainConfig,
        model_config: Optional[dict] = None,
    ):
        self.model = model
        self.sched = sched
        self.cfg = cfg
        self.model_config = model_config or {}
        self.optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=cfg.learning_rate,
            betas=cfg.betas,
            weight_decay=cfg.weight_decay,
        )
        self.ema = EMA(model, cfg.ema_decay)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0

    def step(self, x0: Tensor, cond: Optional[ConditioningBundle] = None) -> float:
        loss = train_step(
            self.model,
            self.optimizer,
            x0,
            cond,
            self.sched,
            self.cfg,
            self.generator,
            self.iteration,
        )
        self.ema.update(self.model)
        self.iteration += 1
        return loss

    def state(self) -> TrainState:
        return TrainState(
            model_config=self.model_config,
            iteration=self.iteration,
            model_state={k: v.clone() for k, v in self.model.state_dict().items()},
            ema_state=self.ema.state_dict(),
            optimizer_state=self.optimizer.state_dict(),
            generator_state=self.generator.get_state(),
            extra={"train_config": asdict(self.cfg)},
        )

    def restore(self, state: TrainState):
        self.model.load_state_dict(state.model_state)
        self.ema.load_state_dict(state.ema_state)
        self.optimizer.load_state_dict(state.optimizer_state)
        self.generator.set_state(state.generator_state.to(torch.uint8))
        self.iteration = state.iteration
