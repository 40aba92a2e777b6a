from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch


@dataclass(frozen=True)
class ImageBatch:
    """
    A dense batch of square images in NCHW layout with pixels in [-1, 1].

    Attributes:
        data (torch.Tensor): Float tensor of shape (B, C, H, W)
    """

    data: torch.Tensor

    def __post_init__(self) -> None:
        if not isinstance(self.data, torch.Tensor):
            object.__setattr__(self, "data", torch.as_tensor(self.data))
        if self.data.ndim != 4:
            raise ValueError(f"ImageBatch needs 4 dims (B, C, H, W), got {tuple(self.data.shape)}")
        batch, channels, height, width = self.data.shape
        if batch < 1:
            raise ValueError("ImageBatch must contain at least one image")
        if channels not in (1, 3):
            raise ValueError(f"Channel count must be 1 or 3, got {channels}")
        if height != width:
            raise ValueError(f"Images must be square, got {height}x{width}")
        if not self.data.is_floating_point():
            raise ValueError(f"ImageBatch must be floating point, got {self.data.dtype}")
        if self.data.min() < -1.0 or self.data.max() > 1.0:
            raise ValueError("ImageBatch values must lie in [-1, 1]")

    @property
    def channel_count(self) -> int:
        return int(self.data.shape[1])

    @property
    def resolution(self) -> int:
        return int(self.data.shape[-1])

    def __len__(self) -> int:
        return int(self.data.shape[0])

    def subset(self, selector: Union[Sequence[int], np.ndarray, torch.Tensor]) -> "ImageBatch":
        """Rows picked by an index list or boolean mask."""
        index = torch.as_tensor(np.asarray(selector))
        if index.dtype == torch.bool:
            index = index.nonzero().flatten()
        return ImageBatch(self.data[index.long()])

    @staticmethod
    def concat(*batches: "ImageBatch") -> "ImageBatch":
        return ImageBatch(torch.cat([b.data for b in batches], dim=0))


def normalize_pixels(raw: np.ndarray) -> ImageBatch:
    """
    Map uint8 pixels to [-1, 1] via ``raw / 127.5 - 1``.

    Args:
        raw (np.ndarray): uint8 array shaped (B, C, H, W)

    Returns:
        ImageBatch: float32 batch
    """
    raw = np.asarray(raw)
    if raw.dtype != np.uint8:
        raise ValueError(f"normalize_pixels expects uint8 input, got {raw.dtype}")
    values = raw.astype(np.float64) / 127.5 - 1.0
    return ImageBatch(torch.from_numpy(values.astype(np.float32)))


def denormalize_pixels(batch: Union[ImageBatch, torch.Tensor]) -> np.ndarray:
    """Inverse of :func:`normalize_pixels`: round to nearest, clamp to [0, 255]."""
    data = batch.data if isinstance(batch, ImageBatch) else batch
    values = (data.detach().cpu().double().numpy() + 1.0) * 127.5
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)
