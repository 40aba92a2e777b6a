import torch

from .pixels import ImageBatch


def rotate_batch(batch: ImageBatch, k: int) -> ImageBatch:
    """
    Rotate every image by ``90 * k`` degrees counter-clockwise.

    Args:
        batch (ImageBatch): Images to rotate
        k (int): Number of quarter turns, one of 0, 1, 2, 3

    Returns:
        ImageBatch: Rotated copy (a pure permutation of pixels)
    """
    if k not in (0, 1, 2, 3):
        raise ValueError(f"Rotation k must be in {{0, 1, 2, 3}}, got {k}")
    return ImageBatch(torch.rot90(batch.data, k, dims=(2, 3)).contiguous())


def rotated_pool(batch: ImageBatch) -> ImageBatch:
    """All three non-trivial rotations of ``batch`` concatenated (k = 1, 2, 3)."""
    return ImageBatch.concat(*(rotate_batch(batch, k) for k in (1, 2, 3)))
