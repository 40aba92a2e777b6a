from pathlib import Path

import pandas as pd
import torch

from ..models.checkpoint import load_denoiser, save_checkpoint
from ..models.consistency import sample_consistency, train_consistency
from ..models.diffusion import sample_diffusion, train_diffusion
from ..projection import save_projection_grid
from .base_pipeline import BasePipeline


class DiffusionTrainingPipeline(BasePipeline):
    """Pipeline for denoiser training"""

    command = "train-diffusion"

    def execute(self) -> Path:
        # 1. Load Data
        data = self.train_data()

        # 2. Train
        self.logger.info("Training diffusion model...")
        model = train_diffusion(self.cfg.training_config(), data)

        # 3. Save checkpoint and loss history
        path = save_checkpoint(model, self.output_dir / "checkpoint")
        pd.DataFrame({"step": range(len(model.history.losses)), "loss": model.history.losses}).to_csv(
            self.output_dir / "losses.csv", index=False, float_format="%.10f"
        )
        if self.cfg.plot:
            samples = sample_diffusion(model, 8, torch.Generator().manual_seed(self.cfg.seed))
            save_projection_grid(data.data[:8], {"sample": samples}, self.output_dir / "samples.png")
        return path


class DistillationPipeline(BasePipeline):
    """Pipeline for consistency distillation, or consistency training without a teacher"""

    command = "distill"

    def execute(self) -> Path:
        # 1. Load Data and teacher
        data = self.train_data()
        teacher = load_denoiser(self.cfg.teacher) if self.cfg.teacher else None
        if teacher is None:
            self.logger.info("No teacher configured: using consistency training")

        # 2. Train
        model = train_consistency(self.cfg.training_config(), data, teacher=teacher)

        # 3. Save checkpoint and loss history
        path = save_checkpoint(model, self.output_dir / "checkpoint")
        pd.DataFrame({"step": range(len(model.history.losses)), "loss": model.history.losses}).to_csv(
            self.output_dir / "losses.csv", index=False, float_format="%.10f"
        )
        if self.cfg.plot:
            samples = sample_consistency(model, 8, torch.Generator().manual_seed(self.cfg.seed))
            save_projection_grid(data.data[:8], {"sample": samples}, self.output_dir / "samples.png")
        return path
