"""Timestep sweeps of the reconstruction scores and Monte-Carlo sample-count ablations."""

from dataclasses import replace
from typing import Dict, Mapping, Optional, Sequence, Tuple

import pandas as pd

from ..preprocessing.pixels import ImageBatch
from ..scoring import PRConfig, PRScorer, ProjectionScorer, batch_score
from ..utils.keyed_rng import KeyedNoise
from ..utils.logger import get_logger
from .metrics import auroc, tnr_at_tpr

logger = get_logger(__name__)

# variant name -> (projection mode, distance)
SWEEP_VARIANTS: Dict[str, Tuple[str, str]] = {
    "single_l2": ("single", "l2"),
    "single_perceptual": ("single", "perceptual"),
    "full_l2": ("full", "l2"),
    "full_perceptual": ("full", "perceptual"),
}


def _model_for(mode: str, models: Mapping[str, object], variant: str):
    if mode == "single":
        model = models.get("denoiser")
        if model is None:
            raise ValueError(f"Variant '{variant}' needs a trained denoiser")
        return model
    model = models.get("consistency") or models.get("denoiser")
    if model is None:
        raise ValueError(f"Variant '{variant}' needs a consistency model or a denoiser")
    return model


def sweep_timesteps(
    models: Mapping[str, object],
    id_data: ImageBatch,
    ood_data: ImageBatch,
    variants: Sequence[str] = tuple(SWEEP_VARIANTS),
    n: int = 4,
    noise: Optional[KeyedNoise] = None,
    workers: int = 1,
    chunk_size: int = 16,
) -> pd.DataFrame:
    """
    AUROC of each reconstruction score variant at every timestep index.

    ``models`` maps ``'denoiser'`` and/or ``'consistency'`` to trained models.
    Full-step variants use the consistency model when present and fall back
    to solving the denoiser's ODE. Returns one row per (variant, index).
    """
    noise = noise or KeyedNoise(0)
    unknown = [v for v in variants if v not in SWEEP_VARIANTS]
    if unknown:
        raise ValueError(f"Unknown sweep variants: {unknown}")
    ood_ids = list(range(len(id_data), len(id_data) + len(ood_data)))

    rows = []
    for variant in variants:
        mode, distance = SWEEP_VARIANTS[variant]
        model = _model_for(mode, models, variant)
        schedule = model.schedule
        for index in range(schedule.N + 1):
            scorer = ProjectionScorer(model, index, distance, n, mode)
            id_scores = batch_score(id_data, scorer, noise, workers, chunk_size)
            ood_scores = batch_score(ood_data, scorer, noise, workers, chunk_size, ood_ids)
            value = auroc(id_scores, ood_scores)
            rows.append({"variant": variant, "index": index, "t": schedule.t[index], "auroc": value})
            logger.debug(f"{variant} index {index}: AUROC {value:.4f}")
        best = max(r["auroc"] for r in rows if r["variant"] == variant)
        logger.info(f"Sweep {variant}: best AUROC {best:.4f}")
    return pd.DataFrame(rows, columns=["variant", "index", "t", "auroc"])


def ablate_ensemble_sizes(
    model,
    id_data: ImageBatch,
    ood_data: ImageBatch,
    cfg: PRConfig,
    sizes: Sequence[Tuple[int, int]],
    noise: Optional[KeyedNoise] = None,
    ensemble: bool = False,
    workers: int = 1,
    chunk_size: int = 16,
) -> pd.DataFrame:
    """AUROC and TNR at 95% TPR of Projection Regret for each (n_alpha, n_beta)."""
    noise = noise or KeyedNoise(0)
    ood_ids = list(range(len(id_data), len(id_data) + len(ood_data)))
    rows = []
    for n_alpha, n_beta in sizes:
        scorer = PRScorer(model, replace(cfg, n_alpha=n_alpha, n_beta=n_beta), ensemble=ensemble)
        id_scores = batch_score(id_data, scorer, noise, workers, chunk_size)
        ood_scores = batch_score(ood_data, scorer, noise, workers, chunk_size, ood_ids)
        rows.append(
            {
                "n_alpha": n_alpha,
                "n_beta": n_beta,
                "auroc": auroc(id_scores, ood_scores),
                "tnr95": tnr_at_tpr(id_scores, ood_scores),
            }
        )
        logger.info(f"n_alpha={n_alpha}, n_beta={n_beta}: AUROC {rows[-1]['auroc']:.4f}")
    return pd.DataFrame(rows, columns=["n_alpha", "n_beta", "auroc", "tnr95"])
