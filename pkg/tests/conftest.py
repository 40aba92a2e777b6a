import pytest
import torch
import torch.nn as nn

from src.models.consistency import ConsistencyModel
from src.models.diffusion import DenoiserModel
from src.models.network import UNetConfig, init_unet
from src.models.schedule import karras_schedule
from src.preprocessing.pixels import ImageBatch


class IdentityDenoiser:
    """D(x, sigma) = x: no denoising at all."""

    kind = "denoiser"

    def __init__(self, schedule=None) -> None:
        self.schedule = schedule or karras_schedule()
        self.calls = 0

    def denoise(self, x, sigma):
        self.calls += 1
        return x.clone()


class ConstantDenoiser:
    """D(x, sigma) = c for every input."""

    kind = "denoiser"

    def __init__(self, value: float = 0.0, schedule=None) -> None:
        self.schedule = schedule or karras_schedule()
        self.value = value

    def denoise(self, x, sigma):
        return torch.full_like(x, self.value)


class IdentityConsistency:
    """f(x, t) = x."""

    kind = "consistency"

    def __init__(self, schedule=None) -> None:
        self.schedule = schedule or karras_schedule()

    def consistency_forward(self, x, t, return_features=False):
        if return_features:
            return x.clone(), [x.clone()]
        return x.clone()


class ConstantConsistency:
    """f(x, t) = anchor image, broadcast over the batch."""

    kind = "consistency"

    def __init__(self, anchor: torch.Tensor, schedule=None) -> None:
        self.schedule = schedule or karras_schedule()
        self.anchor = anchor

    def consistency_forward(self, x, t, return_features=False):
        out = self.anchor.to(x.dtype).expand_as(x).clone()
        if return_features:
            return out, [out]
        return out


def assert_gradients_match(loss_fn, module: nn.Module, entries: int = 8, h: float = 1e-6, rel: float = 1e-4) -> None:
    """Compare autograd with central differences on the largest gradient entries of ``module``."""
    module.zero_grad()
    loss_fn().backward()
    params = [p for p in module.parameters() if p.requires_grad]
    analytic = torch.cat([torch.zeros_like(p).flatten() if p.grad is None else p.grad.flatten() for p in params])
    assert analytic.abs().max() > 0

    owners = [(p, j) for p in params for j in range(p.numel())]
    with torch.no_grad():
        for k in analytic.abs().argsort(descending=True)[:entries].tolist():
            param, j = owners[k]
            flat = param.data.view(-1)
            original = flat[j].item()
            flat[j] = original + h
            up = loss_fn().item()
            flat[j] = original - h
            down = loss_fn().item()
            flat[j] = original
            assert (up - down) / (2 * h) == pytest.approx(analytic[k].item(), rel=rel)


@pytest.fixture
def schedule():
    return karras_schedule()


@pytest.fixture
def tiny_unet_cfg():
    """Single-stage 8x8 grayscale U-Net, a few thousand parameters."""
    return UNetConfig(
        base_channels=8,
        channel_multipliers=(1,),
        n_res_blocks_per_stage=1,
        in_channels=1,
        resolution=8,
        seed=0,
        embedding_channels=16,
    )


@pytest.fixture
def small_unet_cfg():
    """Two-stage 8x8 RGB U-Net with two decoder feature maps."""
    return UNetConfig(
        base_channels=8,
        channel_multipliers=(1, 2),
        n_res_blocks_per_stage=1,
        in_channels=3,
        resolution=8,
        seed=1,
        embedding_channels=16,
    )


@pytest.fixture
def tiny_denoiser(tiny_unet_cfg, schedule):
    return DenoiserModel(init_unet(tiny_unet_cfg), schedule).double().eval()


@pytest.fixture
def tiny_consistency(tiny_unet_cfg, schedule):
    return ConsistencyModel(init_unet(tiny_unet_cfg), schedule).double().eval()


@pytest.fixture
def small_consistency(small_unet_cfg, schedule):
    return ConsistencyModel(init_unet(small_unet_cfg), schedule).double().eval()


@pytest.fixture
def gray_batch():
    """Four 8x8 grayscale images in [-1, 1], float64."""
    generator = torch.Generator().manual_seed(0)
    return ImageBatch(torch.rand((4, 1, 8, 8), generator=generator, dtype=torch.float64) * 2 - 1)


@pytest.fixture
def rgb_batch():
    generator = torch.Generator().manual_seed(1)
    return ImageBatch(torch.rand((4, 3, 8, 8), generator=generator, dtype=torch.float64) * 2 - 1)
