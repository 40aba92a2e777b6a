from pathlib import Path
from typing import Dict, Tuple

from ..data_ingestion import write_image_dir
from ..evaluation.benchmark import BenchmarkTask, EvalReport, evaluate_scores, run_benchmark
from ..evaluation.plots import ScoreReport, plot_rotation_heatmap, plot_sweep
from ..evaluation.selection import best_pair, build_ensemble_C, rotation_auroc_table
from ..evaluation.sweep import sweep_timesteps
from ..models.checkpoint import load_checkpoint, load_denoiser
from ..scoring import ScoreVector
from ..utils.keyed_rng import KeyedNoise
from ..utils.provenance import write_manifest
from .base_pipeline import BasePipeline
from .scoring_pipeline import build_scorer, load_pr_model


class EvaluationPipeline(BasePipeline):
    """Pipeline producing an evaluation report from score files or from checkpoints"""

    command = "evaluate"

    def execute(self) -> EvalReport:
        cfg = self.cfg
        config = {"config_hash": cfg.config_hash}
        if cfg.id_scores or cfg.ood_scores:
            report = self._from_score_files(config)
        else:
            report = self._from_checkpoints(config)

        for row in report.metrics.itertuples(index=False):
            self.logger.info(f"{row.method} / {row.task}: AUROC {row.auroc:.4f}, TNR@95 {row.tnr95:.4f}")
        return report

    def _from_score_files(self, config: Dict[str, object]) -> EvalReport:
        cfg = self.cfg
        if len(cfg.id_scores) != len(cfg.ood_scores):
            raise ValueError("id_scores and ood_scores must list the same number of files")
        cells = {}
        for index, (id_path, ood_path) in enumerate(zip(cfg.id_scores, cfg.ood_scores)):
            id_scores, ood_scores = ScoreVector.load(id_path), ScoreVector.load(ood_path)
            method = id_scores.extras.get("method") or id_scores.metric or "scores"
            name = f"{method}_{index}" if len(cfg.id_scores) > 1 else method
            cells[(name, cfg.task)] = [(id_scores.seed, id_scores, ood_scores)]
            if cfg.plot:
                ScoreReport(id_scores, ood_scores).plot_distribution(str(self.output_dir / "plots"), name)
        return evaluate_scores(self.output_dir, cells, config=config, tpr=cfg.tpr, numbered=False)

    def _from_checkpoints(self, config: Dict[str, object]) -> EvalReport:
        cfg = self.cfg
        id_data, ood_data = self.test_data()
        train = self.train_data() if "msma" in cfg.methods else None
        methods = {
            method: (lambda seed, method=method: build_scorer(cfg.replace(seed=seed), method))
            for method in cfg.methods
        }
        tasks = {cfg.task: BenchmarkTask(id_data, ood_data, train)}
        return run_benchmark(
            self.output_dir,
            methods,
            tasks,
            seeds=cfg.seeds,
            workers=cfg.workers,
            chunk_size=cfg.chunk_size,
            config=config,
            tpr=cfg.tpr,
            numbered=False,
        )


class SweepPipeline(BasePipeline):
    """Pipeline computing AUROC per timestep for each reconstruction-score variant"""

    command = "sweep"

    def execute(self) -> Path:
        cfg = self.cfg
        models = {}
        if cfg.checkpoint:
            model = load_checkpoint(cfg.checkpoint)
            models[model.kind] = model
        if cfg.denoiser:
            models["denoiser"] = load_denoiser(cfg.denoiser)
        id_data, ood_data = self.test_data()

        table = sweep_timesteps(
            models, id_data, ood_data, cfg.variants, cfg.n, KeyedNoise(cfg.seed), cfg.workers, cfg.chunk_size
        )
        path = self.output_dir / "sweep.csv"
        table.to_csv(path, index=False, float_format="%.10f")
        if cfg.plot:
            plot_sweep(table, str(self.output_dir / "sweep.png"))
        self.logger.info(f"Wrote {len(table)} sweep rows to {path}")
        return path


class SelectionPipeline(BasePipeline):
    """Pipeline picking (alpha, beta) on rotated in-distribution data"""

    command = "select-hparams"

    def execute(self) -> Tuple[int, int]:
        cfg = self.cfg
        model = load_pr_model(cfg)
        id_data = self.train_data()

        table = rotation_auroc_table(
            model, id_data, cfg.grid, cfg.pr_config(), KeyedNoise(cfg.seed), workers=cfg.workers, chunk_size=cfg.chunk_size
        )
        table.to_csv(self.output_dir / "rotation_auroc.csv", index=False, float_format="%.10f")
        alpha, beta = best_pair(table)
        ensemble = build_ensemble_C((alpha, beta), cfg.ensemble_radius, model.schedule.N)
        write_manifest(
            self.output_dir / "selection.txt",
            {
                "alpha": alpha,
                "beta": beta,
                "ensemble_C": ",".join(f"{a}:{b}" for a, b in ensemble),
                "config_hash": cfg.config_hash,
            },
        )
        if cfg.plot:
            plot_rotation_heatmap(table, str(self.output_dir / "rotation_auroc.png"))
        self.logger.info(f"Selected alpha={alpha}, beta={beta}")
        return alpha, beta


class ToyExportPipeline(BasePipeline):
    """Pipeline writing the toy benchmark as train/id/ood image folders"""

    command = "make-toy"

    def execute(self) -> Path:
        train, id_test, ood = self.toy_splits()
        for name, batch in (("train", train), ("id", id_test), ("ood", ood)):
            write_image_dir(batch, self.output_dir / name)
            self.logger.info(f"Wrote {len(batch)} {name} images")
        return self.output_dir
