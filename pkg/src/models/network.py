"""Small timestep-conditioned U-Net shared by the denoiser and the consistency model."""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.logger import get_logger

logger = get_logger(__name__)

Params = Dict[str, torch.Tensor]


@dataclass(frozen=True)
class UNetConfig:
    """
    Architecture of the U-Net.

    Attributes:
        base_channels (int): Channels of the first stage
        channel_multipliers (tuple): Per-stage multipliers of ``base_channels``
        n_res_blocks_per_stage (int): Residual blocks per encoder/decoder stage
        in_channels (int): Image channels
        resolution (int): Image side length
        seed (int): Initialization seed
        embedding_channels (int, optional): Width of the noise embedding MLP,
            defaults to ``4 * base_channels``
    """

    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = field(default=(1, 2, 2))
    n_res_blocks_per_stage: int = 1
    in_channels: int = 3
    resolution: int = 24
    seed: int = 0
    embedding_channels: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.base_channels < 8:
            raise ValueError(f"base_channels must be >= 8, got {self.base_channels}")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty list of positive ints")
        if self.n_res_blocks_per_stage < 1:
            raise ValueError("n_res_blocks_per_stage must be >= 1")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        factor = 2 ** (len(self.channel_multipliers) - 1)
        if self.resolution < 1 or self.resolution % factor != 0:
            raise ValueError(
                f"resolution {self.resolution} is not divisible by 2^{len(self.channel_multipliers) - 1}"
                f" = {factor}"
            )

    @property
    def emb_channels(self) -> int:
        return self.embedding_channels or 4 * self.base_channels

    @property
    def n_stages(self) -> int:
        return len(self.channel_multipliers)

    def to_dict(self) -> Dict[str, object]:
        return {
            "base_channels": self.base_channels,
            "channel_multipliers": ",".join(str(m) for m in self.channel_multipliers),
            "n_res_blocks_per_stage": self.n_res_blocks_per_stage,
            "in_channels": self.in_channels,
            "resolution": self.resolution,
            "seed": self.seed,
            "embedding_channels": self.embedding_channels or 0,
        }

    @classmethod
    def from_dict(cls, values: Mapping[str, str]) -> "UNetConfig":
        return cls(
            base_channels=int(values["base_channels"]),
            channel_multipliers=tuple(int(m) for m in str(values["channel_multipliers"]).split(",")),
            n_res_blocks_per_stage=int(values["n_res_blocks_per_stage"]),
            in_channels=int(values["in_channels"]),
            resolution=int(values["resolution"]),
            seed=int(values["seed"]),
            embedding_channels=int(values["embedding_channels"]) or None,
        )


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def sinusoidal_embedding(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=values.dtype, device=values.device) / half
    )
    args = values[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_ch: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_ch, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNet(nn.Module):
    """
    Encoder/decoder with skip connections and a noise-level embedding.

    ``forward`` returns the output image and the decoder feature maps, one
    per decoder stage, taken after the stage's last residual block and
    ordered from the coarsest stage to the finest.
    """

    def __init__(self, cfg: UNetConfig) -> None:
        super().__init__()
        self.cfg = cfg
        base, emb_ch = cfg.base_channels, cfg.emb_channels

        self.embed = nn.Sequential(nn.Linear(base, emb_ch), nn.SiLU(), nn.Linear(emb_ch, emb_ch))
        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)

        self.encoder = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skip_channels: List[int] = []
        current = base
        for stage, mult in enumerate(cfg.channel_multipliers):
            blocks = nn.ModuleList()
            for _ in range(cfg.n_res_blocks_per_stage):
                blocks.append(ResBlock(current, base * mult, emb_ch))
                current = base * mult
            self.encoder.append(blocks)
            skip_channels.append(current)
            if stage < cfg.n_stages - 1:
                self.downsample.append(nn.Conv2d(current, current, 3, stride=2, padding=1))

        self.decoder = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for stage in reversed(range(cfg.n_stages)):
            if stage < cfg.n_stages - 1:
                self.upsample.append(nn.Conv2d(current, current, 3, padding=1))
            blocks = nn.ModuleList()
            for block in range(cfg.n_res_blocks_per_stage):
                in_ch = current + skip_channels[stage] if block == 0 else current
                blocks.append(ResBlock(in_ch, base * cfg.channel_multipliers[stage], emb_ch))
                current = base * cfg.channel_multipliers[stage]
            self.decoder.append(blocks)

        self.norm_out = nn.GroupNorm(_groups(current), current)
        self.conv_out = nn.Conv2d(current, cfg.in_channels, 3, padding=1)

    def forward(
        self, x: torch.Tensor, noise_embedding: torch.Tensor
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        emb = self.embed(sinusoidal_embedding(noise_embedding, self.cfg.base_channels))

        h = self.conv_in(x)
        skips = []
        for stage, blocks in enumerate(self.encoder):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            if stage < len(self.downsample):
                h = self.downsample[stage](h)

        features = []
        for position, blocks in enumerate(self.decoder):
            stage = self.cfg.n_stages - 1 - position
            if position > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[position - 1](h)
            h = torch.cat([h, skips[stage]], dim=1)
            for block in blocks:
                h = block(h, emb)
            features.append(h)

        out = self.conv_out(F.silu(self.norm_out(h)))
        return out, features


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def init_unet(cfg: UNetConfig) -> UNet:
    """
    Build a U-Net with deterministic initialization.

    The global torch RNG state is restored afterwards, so initialization
    does not disturb other random streams.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = UNet(cfg)
    logger.info(f"Initialized U-Net with {count_parameters(net):,} parameters ({cfg})")
    return net


def unet_forward(
    net: UNet, x_in: torch.Tensor, noise_embedding: torch.Tensor
) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Shape-checked forward pass; returns (output, decoder feature maps)."""
    cfg = net.cfg
    expected = (cfg.in_channels, cfg.resolution, cfg.resolution)
    if x_in.ndim != 4 or tuple(x_in.shape[1:]) != expected:
        raise ValueError(f"Expected input of shape (B, {expected}), got {tuple(x_in.shape)}")
    if noise_embedding.ndim != 1 or noise_embedding.shape[0] != x_in.shape[0]:
        raise ValueError(
            f"noise_embedding must have shape ({x_in.shape[0]},), got {tuple(noise_embedding.shape)}"
        )
    return net(x_in, noise_embedding)


def ema_update(target: Mapping[str, torch.Tensor], online: Mapping[str, torch.Tensor], mu: float) -> Params:
    """Return ``mu * target + (1 - mu) * online`` for every tensor."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"EMA decay must be in [0, 1], got {mu}")
    if target.keys() != online.keys():
        raise ValueError("EMA update needs matching parameter names")
    updated: Params = {}
    for name, value in target.items():
        other = online[name]
        if value.shape != other.shape:
            raise ValueError(f"Shape mismatch for {name}: {tuple(value.shape)} vs {tuple(other.shape)}")
        if value.is_floating_point():
            updated[name] = mu * value + (1.0 - mu) * other
        else:
            updated[name] = other.clone()
    return updated


@torch.no_grad()
def ema_update_(target: nn.Module, online: nn.Module, mu: float) -> None:
    """In-place EMA of ``online`` into ``target`` (training loop variant)."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"EMA decay must be in [0, 1], got {mu}")
    for ema_param, param in zip(target.parameters(), online.parameters()):
        ema_param.mul_(mu).add_(param, alpha=1.0 - mu)
