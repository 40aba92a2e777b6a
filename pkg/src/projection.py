"""Projections of an image onto the learned data manifold.

``project_single`` is the one-step denoiser estimate; ``project_full_cm`` and
``project_full_ode`` map the noised input all the way back to ``t_0`` with a
consistency model or by solving the diffusion ODE.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from .models.diffusion import heun_solve
from .preprocessing.pixels import ImageBatch, denormalize_pixels
from .utils.keyed_rng import KeyedNoise, NoiseRole
from .utils.logger import get_logger

logger = get_logger(__name__)

FRESH = "fresh"


class Backend(str, Enum):
    SINGLE_STEP = "single_step"
    CM_FULL = "cm_full"
    ODE_FULL = "ode_full"


REQUIRED_METHOD = {
    Backend.SINGLE_STEP: "denoise",
    Backend.CM_FULL: "consistency_forward",
    Backend.ODE_FULL: "denoise",
}


@dataclass(frozen=True)
class ProjectionRequest:
    """
    Attributes:
        index (int): Timestep index i in [0, N]
        noise (torch.Tensor | str): Unit Gaussian shaped like the images, or ``FRESH``
        backend (Backend): Which projection operator to apply
    """

    index: int
    noise: Union[torch.Tensor, str] = FRESH
    backend: Backend = Backend.CM_FULL

    def __post_init__(self) -> None:
        object.__setattr__(self, "backend", Backend(self.backend))
        if isinstance(self.noise, str) and self.noise != FRESH:
            raise ValueError(f"noise must be a tensor or '{FRESH}', got '{self.noise}'")


def _images(x: Union[ImageBatch, torch.Tensor]) -> torch.Tensor:
    return x.data if isinstance(x, ImageBatch) else x


def _noised(model, x: torch.Tensor, i: int, z: torch.Tensor) -> torch.Tensor:
    model.schedule.check_index(i)
    if z.shape != x.shape:
        raise ValueError(f"Noise shape {tuple(z.shape)} does not match image shape {tuple(x.shape)}")
    return x + model.schedule.t[i] * z


def project_single(model, x: Union[ImageBatch, torch.Tensor], i: int, z: torch.Tensor) -> torch.Tensor:
    """``D(x + t_i z, t_i)``."""
    x = _images(x)
    return model.denoise(_noised(model, x, i, z), model.schedule.t[i])


def project_full_cm(model, x: Union[ImageBatch, torch.Tensor], i: int, z: torch.Tensor) -> torch.Tensor:
    """``f(x + t_i z, t_i)``."""
    x = _images(x)
    return model.consistency_forward(_noised(model, x, i, z), model.schedule.t[i])


def project_full_ode(model, x: Union[ImageBatch, torch.Tensor], i: int, z: torch.Tensor) -> torch.Tensor:
    """Heun-solve the probability-flow ODE from ``x + t_i z`` at ``t_i`` down to ``t_0``."""
    x = _images(x)
    return heun_solve(model, _noised(model, x, i, z), i, 0)


PROJECTORS = {
    Backend.SINGLE_STEP: project_single,
    Backend.CM_FULL: project_full_cm,
    Backend.ODE_FULL: project_full_ode,
}


def fresh_noise(
    noise: KeyedNoise,
    shape: Sequence[int],
    sample_ids: Sequence[int],
    index: int,
    draw: int = 0,
    dtype: torch.dtype = torch.float32,
    device: str = "cpu",
) -> torch.Tensor:
    """One unit Gaussian per sample, keyed by (sample id, index, PROJ, draw)."""
    per_sample = tuple(shape[1:])
    draws = [noise.normal(per_sample, sid, index, int(NoiseRole.PROJ), draw, dtype=dtype, device=device) for sid in sample_ids]
    return torch.stack(draws)


def project(
    model,
    x: Union[ImageBatch, torch.Tensor],
    request: ProjectionRequest,
    noise: Optional[KeyedNoise] = None,
    sample_ids: Optional[Sequence[int]] = None,
    draw: int = 0,
) -> torch.Tensor:
    """
    Apply the projection described by ``request``.

    With ``FRESH`` noise, ``z`` is drawn from ``noise`` keyed by each
    sample's id, so the result does not depend on batch composition.
    """
    x = _images(x)
    method = REQUIRED_METHOD[request.backend]
    if not hasattr(model, method):
        raise TypeError(f"Backend '{request.backend.value}' needs a model with '{method}'")
    if isinstance(request.noise, str):
        if noise is None:
            raise ValueError("Fresh noise requested but no KeyedNoise given")
        if sample_ids is None:
            sample_ids = range(x.shape[0])
        if len(sample_ids) != x.shape[0]:
            raise ValueError("sample_ids must have one id per image")
        z = fresh_noise(noise, x.shape, sample_ids, request.index, draw, x.dtype, str(x.device))
    else:
        z = request.noise.to(dtype=x.dtype, device=x.device)
    return PROJECTORS[request.backend](model, x, request.index, z)


def save_projection_grid(
    inputs: Union[ImageBatch, torch.Tensor],
    projections: Dict[str, torch.Tensor],
    path: Union[str, Path],
    n_images: int = 8,
) -> Path:
    """Save a grid with the inputs on the first row and one row per named projection."""
    inputs = _images(inputs)
    n_images = min(n_images, inputs.shape[0])
    rows = {"input": inputs, **projections}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fig, axes = plt.subplots(len(rows), n_images, figsize=(1.2 * n_images, 1.3 * len(rows)), squeeze=False)
    for r, (label, images) in enumerate(rows.items()):
        pixels = denormalize_pixels(images[:n_images].clamp(-1.0, 1.0))
        for c in range(n_images):
            ax = axes[r][c]
            image = pixels[c].transpose(1, 2, 0)
            if image.shape[-1] == 1:
                ax.imshow(image[..., 0], cmap="gray", vmin=0, vmax=255)
            else:
                ax.imshow(image)
            ax.set_xticks([])
            ax.set_yticks([])
        axes[r][0].set_ylabel(label, fontsize=8)
    plt.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Saved projection grid to {path}")
    return path
