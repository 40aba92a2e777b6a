from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Optional, Tuple

import numpy as np

from ..config import RunConfig
from ..data_ingestion import ImageIngestion
from ..evaluation.benchmark import next_run_dir
from ..preprocessing.pixels import ImageBatch
from ..toy_dataset import split_toy_benchmark
from ..utils.logger import attach_run_log, detach_run_log, get_logger


class BasePipeline(ABC):
    """Abstract base class for all pipelines"""

    command = "run"

    def __init__(self, cfg: RunConfig) -> None:
        self.logger = get_logger(f"{type(self).__module__}.{type(self).__name__}")
        self.cfg = cfg
        self.output_dir: Optional[Path] = None

    @abstractmethod
    def execute(self) -> Any:
        """Pipeline body; runs inside a fresh output directory"""

    def run(self) -> Any:
        """Create the output directory, record the resolved config and run ``execute``."""
        self.output_dir = next_run_dir(self.cfg.output_dir, prefix=self.command.replace("-", "_"))
        self.cfg.write_resolved(self.output_dir)
        handler = attach_run_log(self.output_dir / "run.log")
        try:
            self.logger.info(f"Running {self.command} into {self.output_dir}")
            return self.execute()
        except Exception as e:
            self.logger.error(f"Error in {self.command} pipeline: {str(e)}")
            raise
        finally:
            detach_run_log(handler)

    def load_images(self, path: str, role: str) -> ImageBatch:
        """Common image loading functionality"""
        if not path:
            raise ValueError(f"No {role} image folder configured")
        return ImageIngestion().import_dir(path, self.cfg.resolution, self.cfg.channels)

    def toy_splits(self) -> Tuple[ImageBatch, ImageBatch, ImageBatch]:
        """(train, ID test, OOD test) from the toy benchmark; held-out classes form the OOD set."""
        id_all, ood = split_toy_benchmark(self.cfg.toy_spec(), self.cfg.toy_id_classes)
        order = np.random.default_rng(self.cfg.seed).permutation(len(id_all))
        n_test = max(1, int(round(self.cfg.toy_test_fraction * len(id_all))))
        if n_test >= len(id_all):
            raise ValueError("toy_test_fraction leaves no training images")
        test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
        return id_all.subset(train_idx), id_all.subset(test_idx), ood

    def train_data(self) -> ImageBatch:
        if self.cfg.toy:
            return self.toy_splits()[0]
        return self.load_images(self.cfg.train_dir, "training")

    def test_data(self) -> Tuple[ImageBatch, ImageBatch]:
        if self.cfg.toy:
            _, id_test, ood = self.toy_splits()
            return id_test, ood
        return self.load_images(self.cfg.id_dir, "ID"), self.load_images(self.cfg.ood_dir, "OOD")
