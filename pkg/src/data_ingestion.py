import os
from pathlib import Path
from typing import List, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import ImageLoadError
from .preprocessing.pixels import ImageBatch, denormalize_pixels, normalize_pixels
from .utils.logger import get_logger


class ImageIngestion:
    """
    A class for turning image folders into normalized batches.

    Files are read in bytewise-lexicographic filename order, converted to
    grayscale or RGB, resized to a square resolution and scaled to [-1, 1].

    Attributes:
        logger (logging.Logger): Logger instance for tracking operations
    """

    def __init__(self) -> None:
        """Initialize the ImageIngestion class with a logger."""
        self.logger = get_logger(__name__)

    @staticmethod
    def list_image_files(path: Path) -> List[Path]:
        files = [p for p in path.iterdir() if p.is_file() and not p.name.startswith(".")]
        return sorted(files, key=lambda p: os.fsencode(p.name))

    def import_dir(self, path: Union[str, Path], resolution: int, channels: int) -> ImageBatch:
        """
        Import every image in a directory into an ImageBatch.

        Args:
            path (str | Path): Directory holding image files
            resolution (int): Output side length in pixels
            channels (int): 1 for grayscale, 3 for RGB

        Returns:
            ImageBatch: Batch of shape (N, channels, resolution, resolution)

        Raises:
            ImageLoadError: If the path is missing, a file cannot be decoded,
                            or no image is found
        """
        if channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {channels}")
        if resolution < 1:
            raise ValueError(f"resolution must be positive, got {resolution}")

        path = Path(path)
        if not path.is_dir():
            msg = f"Image directory not found: {path}"
            self.logger.error(msg)
            raise ImageLoadError(msg)

        files = self.list_image_files(path)
        if not files:
            msg = f"zero images found in {path}"
            self.logger.error(msg)
            raise ImageLoadError(msg)

        mode = "L" if channels == 1 else "RGB"
        arrays = []
        for file in files:
            try:
                with Image.open(file) as img:
                    img = img.convert(mode)
                    if img.size != (resolution, resolution):
                        img = img.resize((resolution, resolution), Image.Resampling.BICUBIC)
                    pixels = np.asarray(img, dtype=np.uint8)
            except (UnidentifiedImageError, OSError) as e:
                msg = f"Cannot decode image file {file.name}: {e}"
                self.logger.error(msg)
                raise ImageLoadError(msg) from e

            if pixels.ndim == 2:
                pixels = pixels[None, :, :]
            else:
                pixels = pixels.transpose(2, 0, 1)
            arrays.append(pixels)

        batch = normalize_pixels(np.stack(arrays))
        self.logger.info(f"Loaded {len(batch)} images from {path} at {resolution}px")
        return batch


def load_image_dir(path: Union[str, Path], resolution: int, channels: int) -> ImageBatch:
    return ImageIngestion().import_dir(path, resolution, channels)


def write_image_dir(batch: ImageBatch, path: Union[str, Path], prefix: str = "img") -> List[Path]:
    """Write a batch as PNG files whose names sort in batch order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pixels = denormalize_pixels(batch)
    width = max(5, len(str(len(batch))))
    written = []
    for index, image in enumerate(pixels):
        array = image[0] if image.shape[0] == 1 else image.transpose(1, 2, 0)
        target = path / f"{prefix}_{index:0{width}d}.png"
        Image.fromarray(array).save(target)
        written.append(target)
    return written
