"""Consistency function f_theta with an exact boundary condition, and its training."""

import copy
from typing import Callable, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from ..preprocessing.pixels import ImageBatch
from ..utils.logger import get_logger
from .diffusion import DenoiserModel, Sigma, _as_image, _per_sample, heun_step
from .network import UNet, UNetConfig, ema_update_, init_unet
from .schedule import SigmaSchedule
from .training import TrainingConfig, optimise, sample_minibatch

logger = get_logger(__name__)

PairDistance = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def consistency_preconditioning(
    t: torch.Tensor, sigma_data: float, eps: float
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(c_skip, c_out, c_in, c_noise); c_skip(eps) = 1 and c_out(eps) = 0."""
    shifted = t - eps
    c_skip = sigma_data ** 2 / (shifted ** 2 + sigma_data ** 2)
    c_out = sigma_data * shifted / (t ** 2 + sigma_data ** 2).sqrt()
    c_in = 1.0 / (t ** 2 + sigma_data ** 2).sqrt()
    c_noise = t.log() / 4.0
    return c_skip, c_out, c_in, c_noise


class ConsistencyModel(nn.Module):
    """
    Consistency function ``f(x, t) = c_skip(t) x + c_out(t) F(c_in(t) x, c_noise(t))``.

    The parametrization makes ``f(x, eps) = x`` hold for any weights.
    """

    kind = "consistency"

    def __init__(self, net: UNet, schedule: SigmaSchedule, sigma_data: float = 0.5) -> None:
        super().__init__()
        if sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive, got {sigma_data}")
        self.net = net
        self.schedule = schedule
        self.sigma_data = float(sigma_data)

    @property
    def eps(self) -> float:
        return self.schedule.eps

    @property
    def cfg(self) -> UNetConfig:
        return self.net.cfg

    def consistency_forward(
        self, x_noisy: torch.Tensor, t: Sigma, return_features: bool = False
    ) -> Union[torch.Tensor, Tuple[torch.Tensor, List[torch.Tensor]]]:
        t = _per_sample(t, x_noisy)
        if torch.any(t < self.eps * (1.0 - 1e-6)):
            raise ValueError(f"t must be >= eps ({self.eps})")
        c_skip, c_out, c_in, c_noise = consistency_preconditioning(t, self.sigma_data, self.eps)
        out, features = self.net(_as_image(c_in) * x_noisy, c_noise)
        x_hat = _as_image(c_skip) * x_noisy + _as_image(c_out) * out
        if return_features:
            return x_hat, features
        return x_hat

    def forward(self, x_noisy: torch.Tensor, t: Sigma) -> torch.Tensor:
        return self.consistency_forward(x_noisy, t)


def consistency_forward(model: ConsistencyModel, x_noisy: torch.Tensor, t: Sigma) -> torch.Tensor:
    return model.consistency_forward(x_noisy, t)


def _draw_pairs(
    x: torch.Tensor,
    schedule: SigmaSchedule,
    generator: torch.Generator,
    indices: Optional[torch.Tensor],
    noise: Optional[torch.Tensor],
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if indices is None:
        indices = torch.randint(0, schedule.N, (x.shape[0],), generator=generator)
    if noise is None:
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
    levels = schedule.as_tensor(dtype=x.dtype, device=str(x.device))
    return levels[indices], levels[indices + 1], noise


def cm_loss(
    online,
    target,
    batch: Union[ImageBatch, torch.Tensor],
    distance: PairDistance,
    generator: torch.Generator,
    indices: Optional[torch.Tensor] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Consistency training objective
    ``E d(f_target(x + t_i z, t_i), f_online(x + t_{i+1} z, t_{i+1}))``.

    ``i`` is uniform on {0, ..., N-1} and the same ``z`` is used at both
    levels. No gradient flows through the target model.
    """
    x = batch.data if isinstance(batch, ImageBatch) else batch
    t_cur, t_next, z = _draw_pairs(x, online.schedule, generator, indices, noise)

    with torch.no_grad():
        anchor = target.consistency_forward(x + _as_image(t_cur) * z, t_cur)
    prediction = online.consistency_forward(x + _as_image(t_next) * z, t_next)
    return distance(anchor, prediction).mean()


def cd_loss(
    online,
    target,
    teacher,
    batch: Union[ImageBatch, torch.Tensor],
    distance: PairDistance,
    generator: torch.Generator,
    indices: Optional[torch.Tensor] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Consistency distillation objective: as :func:`cm_loss`, but the target
    sees one teacher Heun step from ``x + t_{i+1} z`` down to ``t_i``.
    """
    x = batch.data if isinstance(batch, ImageBatch) else batch
    t_cur, t_next, z = _draw_pairs(x, online.schedule, generator, indices, noise)
    x_next = x + _as_image(t_next) * z

    with torch.no_grad():
        x_cur = heun_step(teacher, x_next, t_next, t_cur, corrector=True)
        anchor = target.consistency_forward(x_cur, t_cur)
    prediction = online.consistency_forward(x_next, t_next)
    return distance(anchor, prediction).mean()


def build_consistency(cfg: TrainingConfig) -> ConsistencyModel:
    net = init_unet(cfg.unet)
    return ConsistencyModel(net, cfg.schedule(), cfg.sigma_data).to(dtype=cfg.dtype, device=cfg.device)


def train_consistency(
    cfg: TrainingConfig,
    data: ImageBatch,
    teacher: Optional[DenoiserModel] = None,
    distance: Optional[PairDistance] = None,
) -> ConsistencyModel:
    """
    Train a consistency model and return its EMA (target) copy.

    With a ``teacher`` the model is distilled along the teacher's ODE
    trajectories (and starts from the teacher's weights when the
    architectures match); without one it uses consistency training.
    """
    if len(data) == 0:
        raise ValueError("Training data is empty")
    if distance is None:
        from ..distances import get_distance

        distance = get_distance(
            cfg.distance, in_channels=cfg.unet.in_channels, resolution=cfg.unet.resolution, seed=cfg.unet.seed
        ).fn

    online = build_consistency(cfg)
    if teacher is not None:
        if teacher.schedule != online.schedule:
            raise ValueError("Teacher and student must share the noise schedule")
        if teacher.cfg == online.cfg:
            online.net.load_state_dict(teacher.net.state_dict())
        teacher.eval()
    target = copy.deepcopy(online)
    target.requires_grad_(False)

    generator = torch.Generator().manual_seed(cfg.seed)
    images = ImageBatch(data.data.to(dtype=cfg.dtype, device=cfg.device))
    mode = "distillation" if teacher is not None else "consistency training"

    def loss_fn(step: int) -> torch.Tensor:
        x = sample_minibatch(images, cfg.batch_size, generator)
        if teacher is not None:
            return cd_loss(online, target, teacher, x, distance, generator)
        return cm_loss(online, target, x, distance, generator)

    def after_step(step: int) -> None:
        ema_update_(target, online, cfg.ema_decay)

    logger.info(f"Training consistency model by {mode} for {cfg.steps} steps on {len(data)} images")
    online.train()
    history = optimise(online.parameters(), loss_fn, cfg, after_step=after_step, name="consistency")
    target.eval()
    target.history = history
    return target


@torch.no_grad()
def sample_consistency(model: ConsistencyModel, n: int, generator: torch.Generator) -> torch.Tensor:
    """One-step samples ``f(T z, T)``."""
    cfg = model.cfg
    param = next(model.parameters())
    z = torch.randn((n, cfg.in_channels, cfg.resolution, cfg.resolution), generator=generator, dtype=param.dtype)
    z = z.to(param.device)
    return model.consistency_forward(model.schedule.T * z, model.schedule.T)
