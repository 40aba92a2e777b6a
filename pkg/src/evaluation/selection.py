"""Hyperparameter selection on rotated ID data, ensemble candidate sets and score fusion."""

from dataclasses import replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..preprocessing.augmentation import rotated_pool
from ..preprocessing.pixels import ImageBatch
from ..scoring import PRConfig, PRScorer, ScoreVector, batch_score
from ..utils.keyed_rng import KeyedNoise
from ..utils.logger import get_logger
from ..utils.provenance import hash_mapping
from .metrics import auroc

logger = get_logger(__name__)

Pair = Tuple[int, int]
PairScoreFn = Callable[[Pair, ImageBatch, Sequence[int]], np.ndarray]


def rotation_auroc_table(
    model,
    id_data: ImageBatch,
    grid: Sequence[Pair],
    cfg: PRConfig,
    noise: KeyedNoise,
    score_fn: Optional[PairScoreFn] = None,
    workers: int = 1,
    chunk_size: int = 16,
) -> pd.DataFrame:
    """
    AUROC of every (alpha, beta) in ``grid`` for separating ID images from
    their 90/180/270 degree rotations.

    ``score_fn(pair, batch, sample_ids)`` replaces Projection Regret when given.
    Rotated images get sample ids after the ID ids so their noise differs.
    """
    if not grid:
        raise ValueError("Hyperparameter grid must not be empty")
    rotated = rotated_pool(id_data)
    id_ids = list(range(len(id_data)))
    rot_ids = list(range(len(id_data), len(id_data) + len(rotated)))

    if score_fn is None:

        def score_fn(pair: Pair, batch: ImageBatch, sample_ids: Sequence[int]) -> np.ndarray:
            scorer = PRScorer(model, replace(cfg, alpha=pair[0], beta=pair[1]))
            return batch_score(batch, scorer, noise, workers, chunk_size, sample_ids).scores

    rows = []
    for alpha, beta in grid:
        value = auroc(score_fn((alpha, beta), id_data, id_ids), score_fn((alpha, beta), rotated, rot_ids))
        logger.info(f"Rotation AUROC for (alpha={alpha}, beta={beta}): {value:.4f}")
        rows.append({"alpha": int(alpha), "beta": int(beta), "auroc": value})
    return pd.DataFrame(rows, columns=["alpha", "beta", "auroc"])


def best_pair(table: pd.DataFrame) -> Pair:
    """Row with the highest AUROC; ties go to the lexicographically smallest pair."""
    ordered = table.sort_values(["alpha", "beta"], kind="mergesort")
    best = ordered.loc[ordered["auroc"].idxmax()]
    return int(best["alpha"]), int(best["beta"])


def select_hparams_rotated(
    model,
    id_data: ImageBatch,
    grid: Sequence[Pair],
    cfg: PRConfig,
    noise: KeyedNoise,
    score_fn: Optional[PairScoreFn] = None,
    workers: int = 1,
    chunk_size: int = 16,
) -> Pair:
    """Pick (alpha, beta) that best detects rotated ID images as OOD."""
    if len(grid) == 1:
        return tuple(int(v) for v in grid[0])
    table = rotation_auroc_table(model, id_data, grid, cfg, noise, score_fn, workers, chunk_size)
    pair = best_pair(table)
    logger.info(f"Selected (alpha, beta) = {pair}")
    return pair


def build_ensemble_C(center: Pair, radius: int, schedule_N: int) -> List[Pair]:
    """
    Candidate pairs around ``center``: ``a`` within ``radius`` of the centre's
    alpha and ``b`` in ``{a - 1, a}``, clamped to [0, N], deduplicated and sorted.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    alpha = int(center[0])
    if not 0 <= alpha <= schedule_N or not 0 <= int(center[1]) <= schedule_N:
        raise IndexError(f"Center {center} outside [0, {schedule_N}]")

    def clamp(v: int) -> int:
        return min(max(v, 0), schedule_N)

    pairs = {
        (clamp(a), clamp(b))
        for a in range(alpha - radius, alpha + radius + 1)
        for b in (a - 1, a)
    }
    return sorted(pairs)


def combine_multiplicative(s1: ScoreVector, s2: ScoreVector) -> ScoreVector:
    """
    Elementwise product of two score vectors.

    Each vector is first shifted by ``max(0, -min)`` so both are
    non-negative; the shifts are recorded in ``extras``.
    """
    if len(s1) != len(s2):
        raise ValueError(f"Score vectors differ in length: {len(s1)} vs {len(s2)}")
    shift1 = max(0.0, -float(s1.scores.min()))
    shift2 = max(0.0, -float(s2.scores.min()))
    product = (s1.scores + shift1) * (s2.scores + shift2)
    extras = {
        "combined": f"{s1.metric or 'a'}*{s2.metric or 'b'}",
        "shift_1": shift1,
        "shift_2": shift2,
        "config_hash_1": s1.config_hash,
        "config_hash_2": s2.config_hash,
    }
    return ScoreVector(product, config_hash=hash_mapping(extras), seed=s1.seed, metric="product", extras=extras)
