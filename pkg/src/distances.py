"""Per-sample image distances used by the reconstruction scores.

Every distance maps two (B, C, H, W) batches to a (B,) tensor and is
registered under a name for :func:`get_distance`.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ScoreError
from .models.checkpoint import load_state, save_state
from .utils.keyed_rng import KeyedNoise, NoiseRole
from .utils.logger import get_logger
from .utils.provenance import read_manifest

logger = get_logger(__name__)

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DATA_RANGE = 2.0
DEFAULT_GAMMA = 3
NORM_EPS = 1e-10

PairDistance = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class DistanceFn:
    """A named per-sample distance; ``fn(x, y)`` returns shape (B,)."""

    name: str
    fn: PairDistance

    def __call__(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.fn(x, y)


def _check_pair(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"Shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def dist_l2(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Squared l2 distance summed over all pixels."""
    _check_pair(x, y)
    return ((x - y) ** 2).flatten(1).sum(dim=1)


def ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """
    Grayscale SSIM with a 7x7 uniform window over valid positions.

    Colour images are converted by averaging channels. Constants are
    ``C1 = (0.01 * 2)^2`` and ``C2 = (0.03 * 2)^2`` for pixels in [-1, 1].
    """
    _check_pair(x, y)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"Images of size {tuple(x.shape[-2:])} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = x.mean(dim=1, keepdim=True)
    y = y.mean(dim=1, keepdim=True)
    c1 = (SSIM_K1 * SSIM_DATA_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DATA_RANGE) ** 2

    def window_mean(values: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(values, SSIM_WINDOW, stride=1)

    mu_x, mu_y = window_mean(x), window_mean(y)
    var_x = window_mean(x * x) - mu_x ** 2
    var_y = window_mean(y * y) - mu_y ** 2
    cov = window_mean(x * y) - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return ssim_map.flatten(1).mean(dim=1)


def dist_neg_ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return -ssim(x, y)


def dist_one_minus_ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``-SSIM`` shifted by one so that ``d(x, x) = 0``; registered as ``ssim``."""
    return 1.0 + dist_neg_ssim(x, y)


def cosine_sq_distance(u: torch.Tensor, v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """``||u/|u| - v/|v|||^2`` along ``dim``; lies in [0, 4]."""
    norm_u = u.norm(dim=dim, keepdim=True)
    norm_v = v.norm(dim=dim, keepdim=True)
    if torch.any(norm_u == 0) or torch.any(norm_v == 0):
        raise ValueError("cosine distance is undefined for a zero vector")
    return ((u / norm_u - v / norm_v) ** 2).sum(dim=dim)


class FeatureExtractor(nn.Module):
    """
    Frozen multi-scale convolutional feature extractor for perceptual distances.

    Weights come from ``seed`` unless loaded with :func:`load_feature_extractor`.
    Each tap ``l`` has non-negative channel weights ``w_l``.
    """

    kind = "feature_extractor"

    def __init__(
        self,
        in_channels: int = 3,
        resolution: int = 24,
        widths: Sequence[int] = (16, 32, 64),
        seed: int = 0,
    ) -> None:
        super().__init__()
        if not widths:
            raise ValueError("FeatureExtractor needs at least one layer")
        self.in_channels = int(in_channels)
        self.resolution = int(resolution)
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            layers = []
            current = self.in_channels
            for index, width in enumerate(self.widths):
                stride = 1 if index == 0 else 2
                layers.append(nn.Conv2d(current, width, 3, stride=stride, padding=1))
                current = width
            self.layers = nn.ModuleList(layers)
            for index, width in enumerate(self.widths):
                weights = torch.rand(width) + 0.5
                self.register_buffer(f"channel_weights_{index}", weights / weights.sum())
        self.requires_grad_(False)
        self.eval()

    def channel_weights(self, index: int) -> torch.Tensor:
        return getattr(self, f"channel_weights_{index}")

    def forward(self, x: torch.Tensor) -> list:
        if x.shape[1] != self.in_channels or x.shape[-1] != self.resolution:
            raise ValueError(
                f"Extractor expects {self.in_channels} channels at {self.resolution}px, "
                f"got {x.shape[1]} channels at {x.shape[-1]}px"
            )
        taps = []
        h = x.to(self.layers[0].weight.dtype)
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
            taps.append(h)
        return taps

    def train(self, mode: bool = True) -> "FeatureExtractor":
        return super().train(False)


def save_feature_extractor(extractor: FeatureExtractor, directory: Union[str, Path]) -> Path:
    header = {
        "kind": FeatureExtractor.kind,
        "in_channels": extractor.in_channels,
        "resolution": extractor.resolution,
        "widths": ",".join(str(w) for w in extractor.widths),
        "seed": extractor.seed,
    }
    return save_state(extractor.state_dict(), directory, header)


def load_feature_extractor(directory: Union[str, Path]) -> FeatureExtractor:
    """Load extractor weights stored in the checkpoint format."""
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.txt")
    if manifest.get("kind") != FeatureExtractor.kind:
        raise ValueError(f"{directory} does not hold a feature extractor (kind={manifest.get('kind')})")
    extractor = FeatureExtractor(
        in_channels=int(manifest["in_channels"]),
        resolution=int(manifest["resolution"]),
        widths=[int(w) for w in manifest["widths"].split(",")],
        seed=int(manifest["seed"]),
    )
    state = load_state(directory)
    extractor.load_state_dict({k: v.float() for k, v in state.items()})
    extractor.requires_grad_(False)
    logger.info(f"Loaded feature extractor from {directory}")
    return extractor


def _unit_channels(features: torch.Tensor) -> torch.Tensor:
    return features / (features.norm(dim=1, keepdim=True) + NORM_EPS)


def dist_feature_perceptual(extractor: FeatureExtractor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """
    Sum over taps of the spatial mean of the channel-weighted squared
    difference between channel-normalised features.
    """
    _check_pair(x, y)
    total = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
    for index, (fx, fy) in enumerate(zip(extractor(x), extractor(y))):
        weights = extractor.channel_weights(index).to(dtype=fx.dtype, device=fx.device).reshape(1, -1, 1, 1)
        diff = weights * (_unit_channels(fx) - _unit_channels(fy)) ** 2
        total = total + diff.sum(dim=1).flatten(1).mean(dim=1)
    return total


def _unet_features(model, x: torch.Tensor, t: float, z: torch.Tensor) -> list:
    _, features = model.consistency_forward(x + t * z, t, return_features=True)
    return features


def _layer_cosine(fx: torch.Tensor, fy: torch.Tensor, layer: int) -> torch.Tensor:
    for features, which in ((fx, "x"), (fy, "y")):
        zero = (features.norm(dim=1) == 0).nonzero()
        if zero.numel():
            sample, i, j = (int(v) for v in zero[0])
            raise ScoreError(
                f"Zero U-Net feature vector for {which} at layer {layer}, position ({i}, {j})", sample_index=sample
            )
    return cosine_sq_distance(fx, fy, dim=1).flatten(1).mean(dim=1)


@torch.no_grad()
def dist_unet(
    model,
    x: torch.Tensor,
    y: torch.Tensor,
    gamma: int = DEFAULT_GAMMA,
    n_z: int = 1,
    noise: Optional[KeyedNoise] = None,
    z: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Monte-Carlo U-Net feature distance at level ``t_gamma``.

    Each draw uses one ``z`` for both inputs and the whole batch; the
    per-position cosine distance is averaged over space and summed over
    decoder stages.

    Raises:
        ScoreError: If a feature vector is zero, naming the layer and position
    """
    _check_pair(x, y)
    model.schedule.check_index(gamma)
    if n_z < 1:
        raise ValueError(f"n_z must be >= 1, got {n_z}")
    t = model.schedule.t[gamma]
    if z is not None:
        draws = z.reshape(-1, *x.shape[1:]).to(dtype=x.dtype, device=x.device)
    else:
        noise = noise or KeyedNoise(0)
        draws = noise.draws(tuple(x.shape[1:]), (int(NoiseRole.UNET),), n_z, x.dtype, str(x.device))

    total = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
    for draw in draws:
        shared = draw.unsqueeze(0).expand_as(x)
        for layer, (fx, fy) in enumerate(zip(_unet_features(model, x, t, shared), _unet_features(model, y, t, shared))):
            total = total + _layer_cosine(fx, fy, layer)
    return total / draws.shape[0]


def get_distance(name: str, **ctx) -> DistanceFn:
    """
    Look up a distance by name: ``l2``, ``ssim``, ``perceptual`` or ``unet``.

    ``perceptual`` uses ``ctx['extractor']`` or builds a seeded extractor from
    ``in_channels``/``resolution``. ``unet`` needs ``ctx['model']`` (a
    consistency model) and accepts ``gamma``, ``n_z`` and ``noise``.
    """
    if name == "l2":
        return DistanceFn("l2", dist_l2)
    if name == "ssim":
        return DistanceFn("ssim", dist_one_minus_ssim)
    if name == "perceptual":
        extractor = ctx.get("extractor")
        if extractor is None:
            extractor = FeatureExtractor(
                in_channels=ctx.get("in_channels", 3), resolution=ctx.get("resolution", 24), seed=ctx.get("seed", 0)
            )
        return DistanceFn("perceptual", lambda x, y: dist_feature_perceptual(extractor, x, y))
    if name == "unet":
        model = ctx.get("model")
        if model is None or not hasattr(model, "consistency_forward"):
            raise ValueError("The 'unet' distance needs a consistency model in ctx['model']")
        gamma = ctx.get("gamma", DEFAULT_GAMMA)
        n_z = ctx.get("n_z", 1)
        noise = ctx.get("noise")
        return DistanceFn("unet", lambda x, y: dist_unet(model, x, y, gamma=gamma, n_z=n_z, noise=noise))
    raise ValueError(f"Unknown distance '{name}' (expected l2, ssim, perceptual or unet)")


def distance_names() -> Tuple[str, ...]:
    return ("l2", "ssim", "perceptual", "unet")
