from pathlib import Path
from typing import Optional, Union

from ..config import RunConfig
from ..distances import DistanceFn, get_distance, load_feature_extractor
from ..models.checkpoint import load_checkpoint, load_consistency, load_denoiser
from ..models.consistency import ConsistencyModel
from ..models.diffusion import DenoiserModel
from ..projection import Backend
from ..scoring import MSMAScorer, PRScorer, ProjectionScorer, Scorer, ScoreVector, batch_score
from ..utils.keyed_rng import KeyedNoise
from ..utils.provenance import hash_mapping
from .base_pipeline import BasePipeline

METHODS = ("pr", "pr-ensemble", "proj", "msma")


def build_distance(cfg: RunConfig, model) -> Optional[DistanceFn]:
    """Distance with its context; ``None`` lets the scorer build the default one."""
    if cfg.metric == "perceptual" and cfg.extractor:
        return get_distance("perceptual", extractor=load_feature_extractor(cfg.extractor))
    if cfg.metric == "unet":
        return get_distance("unet", model=model, gamma=cfg.gamma, n_z=cfg.n_z, noise=KeyedNoise(cfg.seed))
    return None


def load_pr_model(cfg: RunConfig) -> Union[ConsistencyModel, DenoiserModel]:
    """Model behind Projection Regret: the consistency model, or a denoiser for the ODE backend."""
    if cfg.backend == Backend.CM_FULL.value:
        if not cfg.checkpoint:
            raise ValueError("Projection Regret needs a consistency checkpoint")
        return load_consistency(cfg.checkpoint)
    path = cfg.denoiser or cfg.checkpoint
    if not path:
        raise ValueError("The ode_full backend needs a denoiser checkpoint")
    return load_denoiser(path)


def build_scorer(cfg: RunConfig, method: str) -> Scorer:
    """Scorer for ``method`` from the configured checkpoints."""
    if method not in METHODS:
        raise ValueError(f"Unknown method '{method}' (expected one of {', '.join(METHODS)})")
    if method == "msma":
        path = cfg.denoiser or cfg.checkpoint
        if not path:
            raise ValueError("msma needs a denoiser checkpoint")
        return MSMAScorer(load_denoiser(path), cfg.msma_indices, cfg.n)
    if method == "proj":
        if not cfg.checkpoint:
            raise ValueError("Method 'proj' needs a checkpoint")
        model = load_checkpoint(cfg.checkpoint)
        distance = build_distance(cfg, model)
        return ProjectionScorer(model, cfg.index, distance or cfg.metric, cfg.n, cfg.proj_mode)
    model = load_pr_model(cfg)
    return PRScorer(model, cfg.pr_config(), ensemble=method == "pr-ensemble", distance=build_distance(cfg, model))


class ScoringPipeline(BasePipeline):
    """Pipeline that scores one image set with one method"""

    command = "score"

    def execute(self) -> Path:
        cfg = self.cfg
        noise = KeyedNoise(cfg.seed)

        # 1. Load Data
        if cfg.input_dir:
            images, source = self.load_images(cfg.input_dir, "input"), cfg.input_dir
        elif cfg.toy:
            train, id_test, ood = self.toy_splits()
            images, source = {"train": train, "id": id_test, "ood": ood}[cfg.split], f"toy:{cfg.split}"
        else:
            raise ValueError("score needs input_dir or toy = true")
        self.logger.info(f"Scoring {len(images)} images from {source} with {cfg.method}")

        # 2. Build scorer (MSMA is fitted on the training images)
        scorer = build_scorer(cfg, cfg.method)
        if isinstance(scorer, MSMAScorer):
            scorer.fit(self.train_data(), noise)

        # 3. Score and save
        vector = batch_score(images, scorer, noise, cfg.workers, cfg.chunk_size)
        vector = ScoreVector(
            vector.scores,
            config_hash=hash_mapping({"run": cfg.config_hash, **scorer.config()}),
            seed=cfg.seed,
            metric=vector.metric,
            extras={"method": cfg.method, "source": source, **scorer.config()},
        )
        return vector.save(self.output_dir / "scores.prtc")
