"""Variance-exploding denoiser D_theta, its training objective and the Heun ODE solver."""

from typing import Optional, Tuple, Union

import torch
import torch.nn as nn

from ..preprocessing.pixels import ImageBatch
from ..utils.logger import get_logger
from .network import UNet, UNetConfig, init_unet
from .schedule import SigmaSchedule
from .training import TrainingConfig, optimise, sample_minibatch

logger = get_logger(__name__)

Sigma = Union[float, torch.Tensor]

P_MEAN = -1.2
P_STD = 1.2


def _per_sample(sigma: Sigma, x: torch.Tensor) -> torch.Tensor:
    """Broadcast a float or (B,) sigma to shape (B,) in x's dtype."""
    sigma = torch.as_tensor(sigma, dtype=x.dtype, device=x.device)
    if sigma.ndim == 0:
        sigma = sigma.expand(x.shape[0])
    return sigma


def _as_image(values: torch.Tensor) -> torch.Tensor:
    return values.reshape(-1, 1, 1, 1)


def edm_preconditioning(
    sigma: torch.Tensor, sigma_data: float
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(c_skip, c_out, c_in, c_noise) of the EDM denoiser."""
    total = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / total
    c_out = sigma * sigma_data / total.sqrt()
    c_in = 1.0 / total.sqrt()
    c_noise = sigma.log() / 4.0
    return c_skip, c_out, c_in, c_noise


class DenoiserModel(nn.Module):
    """
    Preconditioned denoiser
    ``D(x, s) = c_skip(s) x + c_out(s) F(c_in(s) x, c_noise(s))``.

    Attributes:
        net (UNet): Raw network F
        sigma_data (float): Data standard deviation
        schedule (SigmaSchedule): Discrete noise levels used for sampling
    """

    kind = "denoiser"

    def __init__(self, net: UNet, schedule: SigmaSchedule, sigma_data: float = 0.5) -> None:
        super().__init__()
        if sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive, got {sigma_data}")
        self.net = net
        self.schedule = schedule
        self.sigma_data = float(sigma_data)

    @property
    def cfg(self) -> UNetConfig:
        return self.net.cfg

    def denoise(self, x_noisy: torch.Tensor, sigma: Sigma) -> torch.Tensor:
        """Denoised estimate of ``x_noisy`` at noise level ``sigma`` (float or (B,))."""
        sigma = _per_sample(sigma, x_noisy)
        if torch.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        c_skip, c_out, c_in, c_noise = edm_preconditioning(sigma, self.sigma_data)
        out, _ = self.net(_as_image(c_in) * x_noisy, c_noise)
        return _as_image(c_skip) * x_noisy + _as_image(c_out) * out

    def forward(self, x_noisy: torch.Tensor, sigma: Sigma) -> torch.Tensor:
        return self.denoise(x_noisy, sigma)


def denoise(model: DenoiserModel, x_noisy: torch.Tensor, sigma: Sigma) -> torch.Tensor:
    return model.denoise(x_noisy, sigma)


def sample_sigmas(
    count: int,
    schedule: SigmaSchedule,
    generator: torch.Generator,
    mode: str = "lognormal",
    dtype: torch.dtype = torch.float32,
    device: str = "cpu",
) -> torch.Tensor:
    """Training noise levels: log-normal (EDM) or uniform on [eps, T] as in the printed objective."""
    if mode == "lognormal":
        normal = torch.randn(count, generator=generator, dtype=torch.float64)
        sigma = (normal * P_STD + P_MEAN).exp()
    elif mode == "uniform":
        unit = torch.rand(count, generator=generator, dtype=torch.float64)
        sigma = schedule.eps + unit * (schedule.T - schedule.eps)
    else:
        raise ValueError(f"Unknown sigma sampling mode '{mode}'")
    return sigma.to(dtype=dtype, device=device)


def dsm_loss(
    model,
    batch: Union[ImageBatch, torch.Tensor],
    generator: torch.Generator,
    weighted: bool = False,
    sigma_sampling: str = "lognormal",
    sigma: Optional[torch.Tensor] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Denoising score matching loss ``E ||D(x + sigma z, sigma) - x||^2``.

    The squared error is summed over pixels and averaged over the batch.
    ``sigma`` and ``noise`` may be pinned; otherwise they are drawn from
    ``generator``.
    """
    x = batch.data if isinstance(batch, ImageBatch) else batch
    if x.shape[0] == 0:
        raise ValueError("dsm_loss needs a non-empty batch")
    if sigma is None:
        sigma = sample_sigmas(x.shape[0], model.schedule, generator, sigma_sampling, x.dtype, str(x.device))
    if noise is None:
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)

    denoised = model.denoise(x + _as_image(sigma) * noise, sigma)
    per_sample = ((denoised - x) ** 2).flatten(1).sum(dim=1)
    if weighted:
        sigma_data = model.sigma_data
        per_sample = per_sample * (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2
    return per_sample.mean()


def build_denoiser(cfg: TrainingConfig) -> DenoiserModel:
    net = init_unet(cfg.unet)
    return DenoiserModel(net, cfg.schedule(), cfg.sigma_data).to(dtype=cfg.dtype, device=cfg.device)


def train_diffusion(cfg: TrainingConfig, data: ImageBatch) -> DenoiserModel:
    """
    Train a denoiser on ``data`` with the denoising score matching objective.

    Deterministic given ``cfg`` (network seed and ``cfg.seed``) and ``data``.
    The loss history is attached to the returned model as ``history``.
    """
    if len(data) == 0:
        raise ValueError("Training data is empty")
    model = build_denoiser(cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    images = ImageBatch(data.data.to(dtype=cfg.dtype, device=cfg.device))

    def loss_fn(step: int) -> torch.Tensor:
        x = sample_minibatch(images, cfg.batch_size, generator)
        return dsm_loss(model, x, generator, weighted=cfg.weighted, sigma_sampling=cfg.sigma_sampling)

    logger.info(
        f"Training denoiser for {cfg.steps} steps on {len(data)} images "
        f"(weighted={cfg.weighted}, sampling={cfg.sigma_sampling})"
    )
    model.train()
    history = optimise(model.parameters(), loss_fn, cfg, name="diffusion")
    model.eval()
    model.history = history
    return model


def heun_step(
    model, x: torch.Tensor, sigma_cur: Sigma, sigma_next: Sigma, corrector: bool = True
) -> torch.Tensor:
    """
    One step of the probability-flow ODE ``dx/dsigma = (x - D(x, sigma)) / sigma``.

    Euler predictor, plus Heun's trapezoidal corrector when ``corrector``
    is set and the target level is positive.
    """
    sigma_cur = _per_sample(sigma_cur, x)
    sigma_next = _per_sample(sigma_next, x)
    step = _as_image(sigma_next - sigma_cur)

    slope = (x - model.denoise(x, sigma_cur)) / _as_image(sigma_cur)
    x_euler = x + step * slope
    if not corrector or torch.any(sigma_next <= 0):
        return x_euler
    slope_next = (x_euler - model.denoise(x_euler, sigma_next)) / _as_image(sigma_next)
    return x + step * (slope + slope_next) / 2.0


def heun_solve(model, x_start: torch.Tensor, from_idx: int, to_idx: int, euler_last: bool = True) -> torch.Tensor:
    """
    Integrate the PF-ODE from ``t[from_idx]`` down to ``t[to_idx]``.

    Every interval uses Heun's corrector except the one ending at ``t_0``,
    which is a plain Euler step when ``euler_last`` is set.
    """
    schedule = model.schedule
    schedule.check_index(from_idx)
    schedule.check_index(to_idx)
    if to_idx > from_idx:
        raise IndexError(f"to_idx ({to_idx}) must not exceed from_idx ({from_idx})")

    x = x_start
    for index in range(from_idx, to_idx, -1):
        corrector = not (euler_last and index - 1 == 0)
        x = heun_step(model, x, schedule.t[index], schedule.t[index - 1], corrector=corrector)
    return x


@torch.no_grad()
def sample_diffusion(model: DenoiserModel, n: int, generator: torch.Generator) -> torch.Tensor:
    """Draw ``n`` images by solving the ODE from ``T * z`` down to ``t_0``."""
    cfg = model.cfg
    param = next(model.parameters())
    z = torch.randn((n, cfg.in_channels, cfg.resolution, cfg.resolution), generator=generator, dtype=param.dtype)
    z = z.to(param.device)
    return heun_solve(model, model.schedule.T * z, model.schedule.N, 0)
