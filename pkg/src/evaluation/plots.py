import os
from typing import Dict, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns
from scipy import stats

from ..scoring import ScoreVector
from ..utils.logger import get_logger


class ScoreReport:
    """
    Summary statistics and plots for ID/OOD score vectors and sweep tables.

    Plots are presentational only; every number also lands in a CSV.

    Attributes:
        scores (pd.DataFrame): Long table with columns ``split`` and ``score``
        logger (logging.Logger): Logger instance for tracking operations
    """

    def __init__(self, id_scores: Union[ScoreVector, np.ndarray], ood_scores: Union[ScoreVector, np.ndarray]) -> None:
        id_values = np.asarray(getattr(id_scores, "scores", id_scores), dtype=np.float64)
        ood_values = np.asarray(getattr(ood_scores, "scores", ood_scores), dtype=np.float64)
        self.scores = pd.DataFrame(
            {
                "split": ["id"] * len(id_values) + ["ood"] * len(ood_values),
                "score": np.concatenate([id_values, ood_values]),
            }
        )
        self.logger = get_logger(__name__)
        self.logger.info(f"Score report over {len(id_values)} ID and {len(ood_values)} OOD samples")

    def calculate_statistics(self, split: str) -> Dict[str, float]:
        """Mean, spread and shape statistics of one split's scores."""
        column = self.scores.loc[self.scores["split"] == split, "score"]
        return {
            "Mean": column.mean(),
            "Median": column.median(),
            "Std Dev": column.std(),
            "Min": column.min(),
            "Max": column.max(),
            "Count": int(column.count()),
            "Skewness": float(stats.skew(column)) if len(column) > 2 else float("nan"),
            "IQR": column.quantile(0.75) - column.quantile(0.25),
        }

    def plot_distribution(self, output_dir: str, name: str = "scores") -> Optional[str]:
        """Overlaid ID/OOD score histograms."""
        try:
            os.makedirs(output_dir, exist_ok=True)
        except OSError as e:
            self.logger.error(f"Failed to create output directory: {e}")
            return None

        plt.figure(figsize=(8, 5))
        sns.histplot(data=self.scores, x="score", hue="split", bins=40, stat="density", common_norm=False)
        plt.title(f"Score distribution: {name}")
        plot_path = os.path.join(output_dir, f"{name}_distribution.png")
        plt.savefig(plot_path)
        plt.close()
        self.logger.info(f"Saved distribution plot for {name}")
        for split in ("id", "ood"):
            self.logger.info(f"Statistics for {split}: {self.calculate_statistics(split)}")
        return plot_path


def plot_sweep(table: pd.DataFrame, path: str) -> str:
    """AUROC against timestep index, one line per variant."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    plt.figure(figsize=(8, 5))
    sns.lineplot(data=table, x="index", y="auroc", hue="variant", marker="o")
    plt.axhline(0.5, color="grey", linestyle="--", linewidth=0.8)
    plt.title("AUROC per timestep")
    plt.ylim(0.0, 1.0)
    plt.savefig(path)
    plt.close()
    return path


def plot_rotation_heatmap(table: pd.DataFrame, path: str) -> str:
    """Rotation-task AUROC over the (alpha, beta) grid."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    grid = table.pivot(index="alpha", columns="beta", values="auroc")
    plt.figure(figsize=(8, 6))
    sns.heatmap(grid, annot=True, fmt=".3f", cmap="coolwarm", center=0.5)
    plt.savefig(path)
    plt.close()
    return path
