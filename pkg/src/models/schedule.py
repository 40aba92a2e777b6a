from dataclasses import dataclass
from typing import Tuple

import torch

DEFAULT_N = 17
DEFAULT_EPS = 0.002
DEFAULT_T = 80.0
DEFAULT_RHO = 7.0


@dataclass(frozen=True)
class SigmaSchedule:
    """
    Discretized noise levels ``eps = t_0 < t_1 < ... < t_N = T`` (sigma_t = t).

    Attributes:
        t (tuple): The N + 1 noise levels
        eps (float): Smallest level
        T (float): Largest level
        N (int): Number of intervals
        rho (float): Karras spacing exponent
    """

    t: Tuple[float, ...]
    eps: float
    T: float
    N: int
    rho: float

    def __post_init__(self) -> None:
        if len(self.t) != self.N + 1:
            raise ValueError(f"Schedule needs N + 1 = {self.N + 1} levels, got {len(self.t)}")
        if self.t[0] != self.eps or self.t[-1] != self.T:
            raise ValueError("Schedule endpoints must equal eps and T")
        if any(b <= a for a, b in zip(self.t, self.t[1:])):
            raise ValueError("Schedule must be strictly increasing")

    def __getitem__(self, index: int) -> float:
        self.check_index(index)
        return self.t[index]

    def __len__(self) -> int:
        return len(self.t)

    def check_index(self, index: int) -> None:
        if not 0 <= index <= self.N:
            raise IndexError(f"Timestep index {index} outside [0, {self.N}]")

    def as_tensor(self, dtype: torch.dtype = torch.float64, device: str = "cpu") -> torch.Tensor:
        return torch.tensor(self.t, dtype=dtype, device=device)

    def to_dict(self) -> dict:
        return {"schedule_N": self.N, "schedule_eps": self.eps, "schedule_T": self.T, "schedule_rho": self.rho}


def karras_schedule(
    N: int = DEFAULT_N, eps: float = DEFAULT_EPS, T: float = DEFAULT_T, rho: float = DEFAULT_RHO
) -> SigmaSchedule:
    """
    Karras et al. spacing
    ``t_i = (eps^(1/rho) + i/N * (T^(1/rho) - eps^(1/rho)))^rho``, i = 0..N.

    Endpoints are set exactly to ``eps`` and ``T``.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0.0 < eps < T:
        raise ValueError(f"Need 0 < eps < T, got eps={eps}, T={T}")
    if rho < 1.0:
        raise ValueError(f"rho must be >= 1, got {rho}")

    lo, hi = eps ** (1.0 / rho), T ** (1.0 / rho)
    levels = [(lo + (i / N) * (hi - lo)) ** rho for i in range(N + 1)]
    levels[0], levels[-1] = float(eps), float(T)
    return SigmaSchedule(t=tuple(levels), eps=float(eps), T=float(T), N=int(N), rho=float(rho))
