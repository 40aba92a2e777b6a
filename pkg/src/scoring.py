"""Abnormality scores: reconstruction errors, Projection Regret and MSMA.

Higher scores mean more abnormal. Every Gaussian draw is keyed by
``(sample_id, alpha, beta, role, draw)`` through :class:`KeyedNoise`, so a
sample's score does not depend on how the dataset is batched, ordered or
split across workers.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import torch
from sklearn.covariance import EmpiricalCovariance

from .container import load_container, save_container
from .distances import DistanceFn, get_distance
from .exceptions import ScoreError
from .preprocessing.pixels import ImageBatch
from .projection import Backend, project_full_cm, project_full_ode, project_single
from .utils.keyed_rng import KeyedNoise, NoiseRole
from .utils.logger import get_logger
from .utils.provenance import hash_mapping, read_manifest, sha256_file, write_manifest

logger = get_logger(__name__)

Pair = Tuple[int, int]

CIFAR_ENSEMBLE: Tuple[Pair, ...] = ((7, 6), (7, 7), (8, 7), (8, 8), (9, 8), (9, 9), (10, 9), (10, 10))
SVHN_ENSEMBLE: Tuple[Pair, ...] = ((10, 10), (11, 10), (11, 11), (12, 11))
MSMA_SHRINKAGE = 1e-3
DEFAULT_CHUNK = 64


@dataclass(frozen=True)
class PRConfig:
    """
    Projection Regret settings.

    Attributes:
        alpha (int): Timestep index of the outer projection
        beta (int): Timestep index of the reconstruction
        n_alpha (int): Outer draws
        n_beta (int): Inner draws per outer draw
        ensemble_C (tuple): (alpha, beta) pairs summed by the ensemble score
        distance (str): Distance name, see :func:`get_distance`
        backend (str): 'cm_full' (consistency model) or 'ode_full' (diffusion ODE)
        chunk_size (int): Images per network call
    """

    alpha: int = 9
    beta: int = 8
    n_alpha: int = 40
    n_beta: int = 10
    ensemble_C: Tuple[Pair, ...] = CIFAR_ENSEMBLE
    distance: str = "l2"
    backend: str = Backend.CM_FULL.value
    chunk_size: int = DEFAULT_CHUNK

    def __post_init__(self) -> None:
        if self.n_alpha < 1 or self.n_beta < 1:
            raise ValueError("n_alpha and n_beta must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.backend not in (Backend.CM_FULL.value, Backend.ODE_FULL.value):
            raise ValueError(f"Projection Regret backend must be cm_full or ode_full, got '{self.backend}'")
        object.__setattr__(self, "ensemble_C", tuple((int(a), int(b)) for a, b in self.ensemble_C))

    def validate(self, schedule) -> None:
        schedule.check_index(self.alpha)
        schedule.check_index(self.beta)
        for a, b in self.ensemble_C:
            schedule.check_index(a)
            schedule.check_index(b)

    def to_dict(self) -> Dict[str, object]:
        values = asdict(self)
        values["ensemble_C"] = ";".join(f"{a},{b}" for a, b in self.ensemble_C)
        return values


@dataclass
class ScoreVector:
    """
    Per-sample scores with their provenance.

    Attributes:
        scores (np.ndarray): One finite float64 score per sample
        config_hash (str): Hash of the scorer configuration
        seed (int): Noise seed
        metric (str): Distance or method name
        extras (dict): Additional manifest entries
    """

    scores: np.ndarray
    config_hash: str = ""
    seed: int = 0
    metric: str = ""
    extras: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ValueError(f"ScoreVector must be 1-D, got shape {self.scores.shape}")
        bad = np.flatnonzero(~np.isfinite(self.scores))
        if bad.size:
            raise ScoreError(f"Non-finite score at sample {bad[0]}", sample_index=int(bad[0]))

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    @staticmethod
    def manifest_path(path: Union[str, Path]) -> Path:
        path = Path(path)
        return path.with_name(path.name + ".manifest.txt")

    def save(self, path: Union[str, Path]) -> Path:
        """Write the scores as a container plus a sidecar ``<file>.manifest.txt``."""
        path = Path(path)
        save_container(self.scores, path)
        entries: Dict[str, object] = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "metric": self.metric,
            "n_samples": len(self),
            "sha256": sha256_file(path),
        }
        entries.update({f"extra.{k}": v for k, v in self.extras.items()})
        write_manifest(self.manifest_path(path), entries)
        logger.info(f"Saved {len(self)} scores to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScoreVector":
        path = Path(path)
        scores = load_container(path)
        sidecar = cls.manifest_path(path)
        manifest = read_manifest(sidecar) if sidecar.exists() else {}
        extras = {k[len("extra."):]: v for k, v in manifest.items() if k.startswith("extra.")}
        return cls(
            scores=scores,
            config_hash=manifest.get("config_hash", ""),
            seed=int(manifest.get("seed", 0)),
            metric=manifest.get("metric", ""),
            extras=extras,
        )


def _images(x: Union[ImageBatch, torch.Tensor]) -> torch.Tensor:
    return x.data if isinstance(x, ImageBatch) else x


def _match_model(model, x: torch.Tensor) -> torch.Tensor:
    """Cast images to the dtype and device of the model parameters, if it has any."""
    parameters = getattr(model, "parameters", None)
    param = next(parameters(), None) if callable(parameters) else None
    return x if param is None else x.to(dtype=param.dtype, device=param.device)


def _sample_ids(x: torch.Tensor, sample_ids: Optional[Sequence[int]]) -> List[int]:
    if sample_ids is None:
        return list(range(x.shape[0]))
    if len(sample_ids) != x.shape[0]:
        raise ValueError(f"Got {len(sample_ids)} sample ids for {x.shape[0]} images")
    return [int(s) for s in sample_ids]


def keyed_draws(
    noise: KeyedNoise,
    x: torch.Tensor,
    sample_ids: Sequence[int],
    alpha: int,
    beta: int,
    role: NoiseRole,
    count: int,
) -> torch.Tensor:
    """Draws for every sample, shaped (B * count, C, H, W), sample-major."""
    per_sample = [
        noise.draws(tuple(x.shape[1:]), (sid, alpha, beta, int(role)), count, x.dtype, str(x.device))
        for sid in sample_ids
    ]
    return torch.cat(per_sample, dim=0)


def _chunked(fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], x: torch.Tensor, z: torch.Tensor, chunk: int) -> torch.Tensor:
    return torch.cat([fn(x[s:s + chunk], z[s:s + chunk]) for s in range(0, x.shape[0], chunk)], dim=0)


def _full_projector(model, backend: str) -> Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor]:
    if backend == Backend.CM_FULL.value:
        if not hasattr(model, "consistency_forward"):
            raise TypeError("cm_full projection needs a consistency model")
        return lambda x, i, z: project_full_cm(model, x, i, z)
    if not hasattr(model, "denoise"):
        raise TypeError("ode_full projection needs a denoiser")
    return lambda x, i, z: project_full_ode(model, x, i, z)


def _single_projector(model) -> Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor]:
    if not hasattr(model, "denoise"):
        raise TypeError("single-step projection needs a denoiser")
    return lambda x, i, z: project_single(model, x, i, z)


def resolve_distance(name: Union[str, DistanceFn], model, x: torch.Tensor, noise: KeyedNoise) -> DistanceFn:
    if isinstance(name, DistanceFn):
        return name
    return get_distance(name, model=model, in_channels=x.shape[1], resolution=x.shape[-1], noise=noise)


@torch.no_grad()
def score_projection(
    model,
    x: Union[ImageBatch, torch.Tensor],
    i: int,
    distance: Union[str, DistanceFn],
    n: int,
    noise: KeyedNoise,
    mode: str = "full",
    sample_ids: Optional[Sequence[int]] = None,
    backend: Optional[str] = None,
    chunk_size: int = DEFAULT_CHUNK,
) -> torch.Tensor:
    """
    Reconstruction error ``(1/n) sum_k d(x, proj(x, i, z_k))`` per sample.

    ``mode='single'`` uses the one-step denoiser projection; ``mode='full'``
    uses the consistency model, or the ODE solve when given a denoiser.
    """
    x = _match_model(model, _images(x))
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    model.schedule.check_index(i)
    if mode == "single":
        projector = _single_projector(model)
    elif mode == "full":
        if backend is None:
            backend = Backend.CM_FULL.value if hasattr(model, "consistency_forward") else Backend.ODE_FULL.value
        projector = _full_projector(model, backend)
    else:
        raise ValueError(f"Unknown projection mode '{mode}' (expected single or full)")

    ids = _sample_ids(x, sample_ids)
    d = resolve_distance(distance, model, x, noise)
    x_rep = x.repeat_interleave(n, dim=0)
    z = keyed_draws(noise, x, ids, i, i, NoiseRole.PROJ, n)
    errors = _chunked(lambda xs, zs: d(xs, projector(xs, i, zs)), x_rep, z, chunk_size)
    return errors.reshape(x.shape[0], n).mean(dim=1)


@torch.no_grad()
def score_pr(
    model,
    x: Union[ImageBatch, torch.Tensor],
    cfg: PRConfig,
    noise: KeyedNoise,
    sample_ids: Optional[Sequence[int]] = None,
    distance: Optional[DistanceFn] = None,
) -> torch.Tensor:
    """
    Projection Regret ``dx - dy`` per sample for the pair ``(cfg.alpha, cfg.beta)``.

    ``dx`` averages ``d(x, P_beta(x, z))`` over ``n_alpha * n_beta`` draws.
    ``dy`` averages, over ``n_alpha`` outer draws ``y_j = P_alpha(x, z_j)``,
    the mean of ``d(y_j, P_beta(y_j, z))`` over ``n_beta`` inner draws.
    All draws of a sample are evaluated together in chunks.
    """
    x = _match_model(model, _images(x))
    cfg.validate(model.schedule)
    project = _full_projector(model, cfg.backend)
    d = distance or resolve_distance(cfg.distance, model, x, noise)
    ids = _sample_ids(x, sample_ids)
    a, b = cfg.alpha, cfg.beta
    n_outer, n_inner = cfg.n_alpha, cfg.n_beta
    batch = x.shape[0]
    chunk = cfg.chunk_size

    x_dx = x.repeat_interleave(n_outer * n_inner, dim=0)
    z_dx = keyed_draws(noise, x, ids, a, b, NoiseRole.DX, n_outer * n_inner)
    dx = _chunked(lambda xs, zs: d(xs, project(xs, b, zs)), x_dx, z_dx, chunk)
    dx = dx.reshape(batch, -1).mean(dim=1)

    x_y = x.repeat_interleave(n_outer, dim=0)
    z_y = keyed_draws(noise, x, ids, a, b, NoiseRole.Y, n_outer)
    y = _chunked(lambda xs, zs: project(xs, a, zs), x_y, z_y, chunk)

    y_rep = y.repeat_interleave(n_inner, dim=0)
    z_inner = keyed_draws(noise, x, ids, a, b, NoiseRole.Y_PROJ, n_outer * n_inner)
    dy = _chunked(lambda ys, zs: d(ys, project(ys, b, zs)), y_rep, z_inner, chunk)
    dy = dy.reshape(batch, -1).mean(dim=1)
    return dx - dy


def score_pr_ensemble(
    model,
    x: Union[ImageBatch, torch.Tensor],
    cfg: PRConfig,
    noise: KeyedNoise,
    sample_ids: Optional[Sequence[int]] = None,
    distance: Optional[DistanceFn] = None,
) -> torch.Tensor:
    """Unweighted sum of :func:`score_pr` over every pair in ``cfg.ensemble_C``."""
    if not cfg.ensemble_C:
        raise ValueError("ensemble_C must not be empty")
    x = _images(x)
    distance = distance or resolve_distance(cfg.distance, model, x, noise)
    total = torch.zeros(x.shape[0], dtype=torch.float64, device=x.device)
    for a, b in cfg.ensemble_C:
        total = total + score_pr(model, x, replace(cfg, alpha=a, beta=b), noise, sample_ids, distance).double()
    return total


@torch.no_grad()
def score_msma(
    model,
    x: Union[ImageBatch, torch.Tensor],
    indices: Sequence[int],
    n: int,
    noise: KeyedNoise,
    sample_ids: Optional[Sequence[int]] = None,
    chunk_size: int = DEFAULT_CHUNK,
) -> torch.Tensor:
    """Per-index estimates of ``E ||(D(x + t_i z, t_i) - x) / t_i||^2``, shaped (B, len(indices))."""
    x = _match_model(model, _images(x))
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not indices:
        raise ValueError("score_msma needs at least one timestep index")
    project = _single_projector(model)
    ids = _sample_ids(x, sample_ids)
    x_rep = x.repeat_interleave(n, dim=0)
    columns = []
    for i in indices:
        model.schedule.check_index(i)
        t = model.schedule.t[i]
        z = keyed_draws(noise, x, ids, i, i, NoiseRole.MSMA, n)
        norms = _chunked(lambda xs, zs: (((project(xs, i, zs) - xs) / t) ** 2).flatten(1).sum(dim=1), x_rep, z, chunk_size)
        columns.append(norms.reshape(x.shape[0], n).mean(dim=1))
    return torch.stack(columns, dim=1)


def msma_aggregate(train_vectors: np.ndarray, test_vectors: np.ndarray, shrinkage: float = MSMA_SHRINKAGE) -> np.ndarray:
    """
    Mahalanobis distance of each test vector under the training mean and covariance.

    The covariance gets ``shrinkage * I`` added to its diagonal.

    Raises:
        ScoreError: If the shrunk covariance is still not positive definite
    """
    train_vectors = np.atleast_2d(np.asarray(train_vectors, dtype=np.float64))
    test_vectors = np.atleast_2d(np.asarray(test_vectors, dtype=np.float64))
    if train_vectors.shape[1] != test_vectors.shape[1]:
        raise ValueError("Train and test vectors must have the same dimension")
    estimator = EmpiricalCovariance().fit(train_vectors)
    covariance = estimator.covariance_ + shrinkage * np.eye(train_vectors.shape[1])
    try:
        factor = scipy.linalg.cho_factor(covariance)
    except np.linalg.LinAlgError as e:
        raise ScoreError(f"Covariance is singular after shrinkage: {e}") from e
    centred = test_vectors - estimator.location_
    squared = np.einsum("ij,ij->i", centred, scipy.linalg.cho_solve(factor, centred.T).T)
    return np.sqrt(np.maximum(squared, 0.0))


class Scorer:
    """Per-chunk scorer used by :func:`batch_score`."""

    metric = ""

    def __call__(self, x: torch.Tensor, sample_ids: Sequence[int], noise: KeyedNoise) -> torch.Tensor:
        raise NotImplementedError

    def config(self) -> Dict[str, object]:
        return {"metric": self.metric}


class PRScorer(Scorer):
    def __init__(self, model, cfg: PRConfig, ensemble: bool = False, distance: Optional[DistanceFn] = None) -> None:
        self.model = model
        self.cfg = cfg
        self.ensemble = ensemble
        self.distance = distance
        self.metric = cfg.distance

    def __call__(self, x: torch.Tensor, sample_ids: Sequence[int], noise: KeyedNoise) -> torch.Tensor:
        if self.ensemble:
            return score_pr_ensemble(self.model, x, self.cfg, noise, sample_ids, self.distance)
        return score_pr(self.model, x, self.cfg, noise, sample_ids, self.distance)

    def config(self) -> Dict[str, object]:
        return {"method": "pr-ensemble" if self.ensemble else "pr", **self.cfg.to_dict()}


class ProjectionScorer(Scorer):
    def __init__(
        self,
        model,
        index: int,
        distance: Union[str, DistanceFn] = "l2",
        n: int = 10,
        mode: str = "full",
        backend: Optional[str] = None,
    ) -> None:
        self.model = model
        self.index = index
        self.n = n
        self.mode = mode
        self.backend = backend
        self.distance = distance
        self.metric = distance if isinstance(distance, str) else distance.name

    def __call__(self, x: torch.Tensor, sample_ids: Sequence[int], noise: KeyedNoise) -> torch.Tensor:
        return score_projection(
            self.model, x, self.index, self.distance, self.n, noise, self.mode, sample_ids, self.backend
        )

    def config(self) -> Dict[str, object]:
        return {"method": "proj", "index": self.index, "n": self.n, "mode": self.mode, "distance": self.metric}


class MSMAScorer(Scorer):
    """Mahalanobis aggregate of MSMA vectors; call :meth:`fit` on training data first."""

    metric = "msma"

    def __init__(self, model, indices: Sequence[int], n: int = 10) -> None:
        self.model = model
        self.indices = tuple(int(i) for i in indices)
        self.n = n
        self.train_vectors: Optional[np.ndarray] = None

    def fit(self, train: ImageBatch, noise: KeyedNoise, sample_id_offset: int = 1_000_000) -> "MSMAScorer":
        ids = range(sample_id_offset, sample_id_offset + len(train))
        vectors = score_msma(self.model, train, self.indices, self.n, noise, list(ids))
        self.train_vectors = vectors.double().cpu().numpy()
        logger.info(f"Fitted MSMA statistics on {len(train)} training images")
        return self

    def __call__(self, x: torch.Tensor, sample_ids: Sequence[int], noise: KeyedNoise) -> torch.Tensor:
        if self.train_vectors is None:
            raise ScoreError("MSMAScorer must be fitted before scoring")
        vectors = score_msma(self.model, x, self.indices, self.n, noise, sample_ids).double().cpu().numpy()
        return torch.from_numpy(msma_aggregate(self.train_vectors, vectors))

    def config(self) -> Dict[str, object]:
        return {"method": "msma", "indices": ",".join(map(str, self.indices)), "n": self.n}


def batch_score(
    dataset: ImageBatch,
    scorer: Callable[[torch.Tensor, Sequence[int], KeyedNoise], torch.Tensor],
    noise: KeyedNoise,
    workers: int = 1,
    chunk_size: int = 16,
    sample_ids: Optional[Sequence[int]] = None,
) -> ScoreVector:
    """
    Score every sample of ``dataset`` in fixed chunks, optionally on a thread pool.

    Chunk boundaries do not depend on ``workers``, so serial and parallel runs
    agree bit for bit.

    Raises:
        ScoreError: If any score is non-finite (names the sample index)
    """
    if len(dataset) == 0:
        raise ValueError("Cannot score an empty dataset")
    if chunk_size < 1 or workers < 1:
        raise ValueError("chunk_size and workers must be >= 1")
    ids = _sample_ids(dataset.data, sample_ids)
    starts = list(range(0, len(dataset), chunk_size))

    def run(start: int) -> np.ndarray:
        chunk = dataset.data[start:start + chunk_size]
        scores = scorer(chunk, ids[start:start + chunk_size], noise)
        return torch.as_tensor(scores).detach().double().cpu().numpy().reshape(-1)

    if workers == 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    scores = np.concatenate(parts)

    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        logger.error(f"Non-finite score for sample {bad[0]}")
        raise ScoreError(f"Non-finite score at sample {bad[0]}", sample_index=int(bad[0]))

    config = scorer.config() if hasattr(scorer, "config") else {}
    metric = getattr(scorer, "metric", "")
    logger.info(f"Scored {len(scores)} samples ({metric or 'custom'}) with {workers} worker(s)")
    return ScoreVector(scores, config_hash=hash_mapping(config), seed=noise.seed, metric=metric)
