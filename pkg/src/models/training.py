"""Optimisation loop shared by diffusion and consistency training."""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import torch

from ..exceptions import TrainingDivergenceError
from ..preprocessing.pixels import ImageBatch
from ..utils.logger import get_logger
from .network import UNetConfig
from .schedule import DEFAULT_EPS, DEFAULT_N, DEFAULT_RHO, DEFAULT_T, SigmaSchedule, karras_schedule

logger = get_logger(__name__)

DIVERGENCE_THRESHOLD = 1e6


@dataclass
class TrainingConfig:
    """
    Settings shared by ``train_diffusion`` and ``train_consistency``.

    Attributes:
        unet (UNetConfig): Network architecture (its seed drives initialization)
        steps (int): Optimizer steps
        batch_size (int): Images per step, drawn with replacement
        lr (float): Adam learning rate
        seed (int): Seed for minibatch and noise sampling
        sigma_data (float): Data standard deviation used by preconditioning
        schedule_N, schedule_eps, schedule_T, schedule_rho: Karras schedule
        weighted (bool): EDM loss weighting for the diffusion objective
        sigma_sampling (str): 'lognormal' or 'uniform' noise-level sampling
        ema_decay (float): EMA decay of the consistency target
        distance (str): Metric inside the consistency objective
        log_every (int): Loss logging period in steps
        grad_clip (float, optional): Max gradient norm
        dtype (torch.dtype): Parameter/compute dtype
        device (str): Torch device
    """

    unet: UNetConfig = field(default_factory=UNetConfig)
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    sigma_data: float = 0.5
    schedule_N: int = DEFAULT_N
    schedule_eps: float = DEFAULT_EPS
    schedule_T: float = DEFAULT_T
    schedule_rho: float = DEFAULT_RHO
    weighted: bool = False
    sigma_sampling: str = "lognormal"
    ema_decay: float = 0.99
    distance: str = "l2"
    log_every: int = 100
    grad_clip: Optional[float] = None
    dtype: torch.dtype = torch.float32
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.sigma_sampling not in ("lognormal", "uniform"):
            raise ValueError(f"Unknown sigma_sampling '{self.sigma_sampling}'")

    def schedule(self) -> SigmaSchedule:
        return karras_schedule(self.schedule_N, self.schedule_eps, self.schedule_T, self.schedule_rho)


@dataclass
class TrainingHistory:
    losses: List[float] = field(default_factory=list)

    @property
    def final(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def sample_minibatch(data: ImageBatch, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    index = torch.randint(0, len(data), (batch_size,), generator=generator)
    return data.data[index]


def optimise(
    parameters,
    loss_fn: Callable[[int], torch.Tensor],
    cfg: TrainingConfig,
    after_step: Optional[Callable[[int], None]] = None,
    name: str = "model",
) -> TrainingHistory:
    """
    Run ``cfg.steps`` Adam steps on ``loss_fn(step)``.

    Raises:
        TrainingDivergenceError: If the loss is non-finite or exceeds 1e6
    """
    parameters = list(parameters)
    optimizer = torch.optim.Adam(parameters, lr=cfg.lr, weight_decay=0.0)
    history = TrainingHistory()

    for step in range(cfg.steps):
        loss = loss_fn(step)
        value = float(loss.detach())
        if not math.isfinite(value) or value > DIVERGENCE_THRESHOLD:
            logger.error(f"{name}: loss {value} at step {step}, aborting")
            raise TrainingDivergenceError(step, value)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(parameters, cfg.grad_clip)
        optimizer.step()
        if after_step is not None:
            after_step(step)

        history.losses.append(value)
        logger.debug(f"{name} step {step}: loss={value:.6f}")
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            logger.info(f"{name} step {step + 1}/{cfg.steps}: loss={value:.6f}")

    return history
