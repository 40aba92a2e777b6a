"""Synthetic shapes-on-texture benchmark.

Each image is a band-limited noise texture with an anti-aliased shape on
top. The texture comes from a pool shared by every semantic class, so a
held-out class differs from the training classes in its foreground only.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
from scipy import ndimage

from .preprocessing.pixels import ImageBatch
from .utils.logger import get_logger

SHAPES = ("ellipse", "triangle", "ring", "cross", "square")
SUPERSAMPLE = 4
BACKGROUND_AMPLITUDE = 0.35

logger = get_logger(__name__)


@dataclass(frozen=True)
class ToySpec:
    resolution: int = 24
    n_semantic_classes: int = 3
    n_background_textures: int = 4
    samples_per_class: int = 256
    seed: int = 0
    channels: int = 3

    def __post_init__(self) -> None:
        if self.resolution < 8:
            raise ValueError(f"resolution must be >= 8, got {self.resolution}")
        for name in ("n_semantic_classes", "n_background_textures", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _rng(spec: ToySpec, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *key]))


def shape_name(label: int) -> str:
    return SHAPES[label] if label < len(SHAPES) else f"polygon{label}"


def _texture_pool(spec: ToySpec) -> np.ndarray:
    """Textures on a doubled canvas so each image can take a random crop."""
    size = 2 * spec.resolution
    pool = []
    for texture in range(spec.n_background_textures):
        rng = _rng(spec, 0, texture)
        noise = rng.standard_normal((spec.channels, size, size))
        bandwidth = 0.8 + 0.9 * texture
        smooth = np.stack([ndimage.gaussian_filter(c, bandwidth, mode="wrap") for c in noise])
        smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-12)
        tint = rng.uniform(-0.55, -0.1, size=(spec.channels, 1, 1))
        pool.append(tint + BACKGROUND_AMPLITUDE * smooth)
    return np.stack(pool)


def _inside(label: int, u: np.ndarray, v: np.ndarray, radius: float, aspect: float) -> np.ndarray:
    """Point-in-shape test in shape-aligned coordinates (u, v)."""
    name = shape_name(label)
    r = np.hypot(u, v)
    if name == "ellipse":
        return (u / radius) ** 2 + (v / (radius * aspect)) ** 2 <= 1.0
    if name == "ring":
        return (r <= radius) & (r >= 0.55 * radius)
    if name == "cross":
        arm = 0.3 * radius
        return ((np.abs(u) <= arm) & (np.abs(v) <= radius)) | (
            (np.abs(v) <= arm) & (np.abs(u) <= radius)
        )
    sides = {"triangle": 3, "square": 4}.get(name, label)
    sector = 2.0 * np.pi / sides
    theta = np.mod(np.arctan2(v, u), sector) - sector / 2.0
    return r * np.cos(theta) <= radius * np.cos(np.pi / sides)


def _render_mask(label: int, rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Coverage in [0, 1] of one randomly placed shape, by supersampling."""
    fine = resolution * SUPERSAMPLE
    centre = resolution / 2.0 + rng.uniform(-0.08, 0.08, size=2) * resolution
    radius = rng.uniform(0.2, 0.3) * resolution
    angle = rng.uniform(0.0, 2.0 * np.pi)
    aspect = rng.uniform(0.7, 1.0)

    coords = (np.arange(fine) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords - centre[0], coords - centre[1], indexing="ij")
    u = np.cos(angle) * xx + np.sin(angle) * yy
    v = -np.sin(angle) * xx + np.cos(angle) * yy
    hit = _inside(label, u, v, radius, aspect).astype(np.float64)
    return hit.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))


def gen_toy_dataset(spec: ToySpec) -> Tuple[ImageBatch, np.ndarray, np.ndarray]:
    """
    Generate the shapes-on-texture dataset described by ``spec``.

    Images are ordered class by class. The output is a pure function of
    ``spec``: every random choice is keyed by (seed, image index).

    Returns:
        Tuple of (images, semantic_labels, background_labels)
    """
    res = spec.resolution
    pool = _texture_pool(spec)
    semantic = np.repeat(np.arange(spec.n_semantic_classes), spec.samples_per_class)
    background = np.empty_like(semantic)
    images = np.empty((len(semantic), spec.channels, res, res), dtype=np.float64)

    for index, label in enumerate(semantic):
        rng = _rng(spec, 1, index)
        texture = int(rng.integers(spec.n_background_textures))
        oy, ox = rng.integers(0, res, size=2)
        canvas = pool[texture, :, oy:oy + res, ox:ox + res]

        mask = _render_mask(int(label), rng, res)[None]
        intensity = rng.uniform(0.55, 0.95)
        colour = intensity * rng.uniform(0.7, 1.0, size=(spec.channels, 1, 1))
        images[index] = canvas * (1.0 - mask) + colour * mask
        background[index] = texture

    images = np.clip(images, -1.0, 1.0).astype(np.float32)
    logger.info(
        f"Generated toy dataset: {len(semantic)} images, "
        f"{spec.n_semantic_classes} classes, {spec.n_background_textures} textures"
    )
    return ImageBatch(torch.from_numpy(images)), semantic, background


def split_toy_benchmark(
    spec: ToySpec, n_id_classes: int
) -> Tuple[ImageBatch, ImageBatch]:
    """Split a toy dataset into ID classes ``[0, n_id_classes)`` and the held-out rest."""
    if not 1 <= n_id_classes < spec.n_semantic_classes:
        raise ValueError(
            f"n_id_classes must be in [1, {spec.n_semantic_classes - 1}], got {n_id_classes}"
        )
    images, semantic, _ = gen_toy_dataset(spec)
    in_dist = semantic < n_id_classes
    return images.subset(in_dist), images.subset(~in_dist)
