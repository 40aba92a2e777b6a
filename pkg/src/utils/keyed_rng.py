"""Counter-based noise keyed by (seed, sample, draw, ...).

Every Gaussian draw used for scoring is addressed by a tuple of integers
instead of being pulled from a shared stream. Batched, looped and
parallel evaluations therefore see exactly the same noise, whatever
order they run in.
"""

from enum import IntEnum
from typing import Sequence, Tuple

import numpy as np
import torch


class NoiseRole(IntEnum):
    """Purpose of a draw; part of every noise key."""

    DX = 0
    Y = 1
    Y_PROJ = 2
    PROJ = 3
    MSMA = 4
    UNET = 5


class KeyedNoise:
    """Gaussian noise addressed by integer keys.

    Each key is hashed together with the seed through ``np.random.SeedSequence``
    and used to key a Philox counter-based generator, so a draw depends only
    on ``(seed, *key)``.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)

    def _generator(self, key: Sequence[int]) -> np.random.Generator:
        entropy = [self.seed] + [int(k) + 1 for k in key]
        philox_key = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=philox_key))

    def normal_np(self, shape: Tuple[int, ...], *key: int) -> np.ndarray:
        return self._generator(key).standard_normal(shape)

    def normal(
        self,
        shape: Tuple[int, ...],
        *key: int,
        dtype: torch.dtype = torch.float32,
        device: str = "cpu",
    ) -> torch.Tensor:
        """One standard normal tensor of ``shape`` for ``key``."""
        return torch.from_numpy(self.normal_np(shape, *key)).to(dtype=dtype, device=device)

    def draws(
        self,
        shape: Tuple[int, ...],
        prefix: Sequence[int],
        count: int,
        dtype: torch.dtype = torch.float32,
        device: str = "cpu",
    ) -> torch.Tensor:
        """Stack ``count`` draws keyed ``(*prefix, 0) ... (*prefix, count - 1)``."""
        stacked = np.stack([self.normal_np(shape, *prefix, k) for k in range(count)])
        return torch.from_numpy(stacked).to(dtype=dtype, device=device)

    def uniform_indices(self, high: int, count: int, *key: int) -> np.ndarray:
        return self._generator(key).integers(0, high, size=count)

    def __repr__(self) -> str:
        return f"KeyedNoise(seed={self.seed})"
