"""Detection metrics with OOD as the positive class (higher score = more abnormal)."""

import math

import numpy as np
from scipy.stats import rankdata


def _as_scores(values, name: str) -> np.ndarray:
    values = np.asarray(getattr(values, "scores", values), dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError(f"{name} scores must not be empty")
    return values


def auroc(id_scores, ood_scores) -> float:
    """
    Area under the ROC curve, ``P(ood > id) + 0.5 P(ood = id)``.

    Computed from the Mann-Whitney U statistic over average ranks.
    """
    id_scores = _as_scores(id_scores, "ID")
    ood_scores = _as_scores(ood_scores, "OOD")
    n, m = id_scores.size, ood_scores.size
    ranks = rankdata(np.concatenate([ood_scores, id_scores]), method="average")
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


def tnr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """
    Fraction of ID scores below the threshold that keeps ``tpr`` of OOD scores.

    The threshold is the K-th largest OOD score with ``K = ceil(tpr * |ood|)``;
    every OOD score at or above it counts as detected, so at least ``tpr`` of
    them are. ID scores strictly below the threshold are true negatives.
    """
    if not 0.0 < tpr <= 1.0:
        raise ValueError(f"tpr must lie in (0, 1], got {tpr}")
    id_scores = _as_scores(id_scores, "ID")
    ood_scores = _as_scores(ood_scores, "OOD")
    k = max(1, math.ceil(tpr * ood_scores.size - 1e-9))
    threshold = np.sort(ood_scores)[::-1][k - 1]
    return float(np.mean(id_scores < threshold))
