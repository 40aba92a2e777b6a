"""Benchmark orchestration: score every (method, task, seed), write an evaluation report."""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from ..preprocessing.pixels import ImageBatch
from ..scoring import ScoreVector, batch_score
from ..utils.keyed_rng import KeyedNoise
from ..utils.logger import get_logger
from ..utils.provenance import code_version, hash_mapping, sha256_file, write_manifest
from .metrics import auroc, tnr_at_tpr

logger = get_logger(__name__)

Cell = Tuple[str, str]
SeedScores = Tuple[int, ScoreVector, ScoreVector]


@dataclass
class BenchmarkTask:
    """ID vs OOD images, plus optional training images for scorers that need fitting."""

    id_data: ImageBatch
    ood_data: ImageBatch
    train_data: Optional[ImageBatch] = None


@dataclass
class EvalReport:
    """
    Attributes:
        directory (Path): Report directory
        metrics (pd.DataFrame): method, task, auroc, tnr95 (averaged over seeds)
        per_seed (pd.DataFrame): method, task, seed, auroc, tnr95
        sweeps (dict): Sweep tables by name
        seeds (list): Seeds used
        score_files (dict): Score file name -> SHA-256
        wall_clock (float): Seconds spent
    """

    directory: Path
    metrics: pd.DataFrame
    per_seed: pd.DataFrame
    sweeps: Dict[str, pd.DataFrame] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)
    score_files: Dict[str, str] = field(default_factory=dict)
    config_hash: str = ""
    wall_clock: float = 0.0

    def auroc(self, method: str, task: str) -> float:
        row = self.metrics[(self.metrics["method"] == method) & (self.metrics["task"] == task)]
        return float(row["auroc"].iloc[0])


def next_run_dir(base: Union[str, Path], prefix: str = "run") -> Path:
    """Create and return ``base/<prefix>_NNN`` with the first unused number."""
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    index = 0
    while True:
        candidate = base / f"{prefix}_{index:03d}"
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            index += 1


def _empty_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if (path / "metrics.csv").exists():
        raise FileExistsError(f"{path} already holds a report")
    return path


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "-" for c in name)


def evaluate_scores(
    output_dir: Union[str, Path],
    cells: Mapping[Cell, Sequence[SeedScores]],
    sweeps: Optional[Mapping[str, pd.DataFrame]] = None,
    config: Optional[Mapping[str, object]] = None,
    tpr: float = 0.95,
    started: Optional[float] = None,
    numbered: bool = True,
) -> EvalReport:
    """
    Turn score vectors into a report in a new numbered directory under
    ``output_dir`` (or in ``output_dir`` itself, which must be empty, when
    ``numbered`` is off).

    ``cells`` maps (method, task) to per-seed (seed, id scores, ood scores).
    AUROC and TNR are computed per seed and averaged.
    """
    started = time.perf_counter() if started is None else started
    if not cells:
        raise ValueError("Nothing to evaluate")
    directory = next_run_dir(output_dir) if numbered else _empty_dir(output_dir)
    (directory / "scores").mkdir(exist_ok=True)
    config = dict(config or {})
    config_hash = hash_mapping({k: str(v) for k, v in config.items()})

    per_seed_rows = []
    score_files: Dict[str, str] = {}
    for (method, task), runs in cells.items():
        for seed, id_scores, ood_scores in runs:
            for split, vector in (("id", id_scores), ("ood", ood_scores)):
                name = f"{_safe(method)}__{_safe(task)}__seed{seed}__{split}.prtc"
                path = vector.save(directory / "scores" / name)
                score_files[name] = sha256_file(path)
            per_seed_rows.append(
                {
                    "method": method,
                    "task": task,
                    "seed": seed,
                    "auroc": auroc(id_scores, ood_scores),
                    "tnr95": tnr_at_tpr(id_scores, ood_scores, tpr),
                }
            )
    per_seed = pd.DataFrame(per_seed_rows, columns=["method", "task", "seed", "auroc", "tnr95"])
    metrics = per_seed.groupby(["method", "task"], sort=False, as_index=False)[["auroc", "tnr95"]].mean()

    metrics.to_csv(directory / "metrics.csv", index=False, float_format="%.10f")
    per_seed.to_csv(directory / "metrics_per_seed.csv", index=False, float_format="%.10f")
    sweeps = dict(sweeps or {})
    if sweeps:
        (directory / "sweeps").mkdir(exist_ok=True)
        for name, table in sweeps.items():
            table.to_csv(directory / "sweeps" / f"{_safe(name)}.csv", index=False, float_format="%.10f")

    seeds = sorted({int(s) for s in per_seed["seed"]})
    wall_clock = time.perf_counter() - started
    report = EvalReport(directory, metrics, per_seed, sweeps, seeds, score_files, config_hash, wall_clock)
    _write_report_text(report)
    manifest: Dict[str, object] = {"code_version": code_version(), "config_hash": config_hash}
    manifest["seeds"] = ",".join(str(s) for s in seeds)
    manifest.update({f"config.{k}": v for k, v in config.items()})
    manifest.update({f"score.{name}": digest for name, digest in sorted(score_files.items())})
    write_manifest(directory / "manifest.txt", manifest)
    logger.info(f"Wrote evaluation report to {directory}")
    return report


def _write_report_text(report: EvalReport) -> None:
    lines = [
        "Novelty detection report",
        f"code version: {code_version()}",
        f"config hash: {report.config_hash}",
        f"seeds: {', '.join(str(s) for s in report.seeds)}",
        f"wall clock: {report.wall_clock:.1f}s",
        "",
        "method / task: AUROC (TNR@95%TPR), mean over seeds",
    ]
    for row in report.metrics.itertuples(index=False):
        lines.append(f"  {row.method} / {row.task}: {row.auroc:.4f} ({row.tnr95:.4f})")
        seeds = report.per_seed[(report.per_seed["method"] == row.method) & (report.per_seed["task"] == row.task)]
        per_seed = ", ".join(f"seed {s.seed}: {s.auroc:.4f}" for s in seeds.itertuples(index=False))
        lines.append(f"    {per_seed}")
    for name, table in report.sweeps.items():
        lines.append("")
        lines.append(f"sweep {name}: {len(table)} rows")
        if {"variant", "auroc"} <= set(table.columns):
            for variant, best in table.groupby("variant", sort=False)["auroc"].max().items():
                lines.append(f"  {variant}: best AUROC {best:.4f}")
    lines.append("")
    lines.append("score files (sha256):")
    lines.extend(f"  {name} {digest}" for name, digest in sorted(report.score_files.items()))
    (report.directory / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


ScorerFactory = Callable[[int], object]


def run_benchmark(
    output_dir: Union[str, Path],
    methods: Mapping[str, ScorerFactory],
    tasks: Mapping[str, BenchmarkTask],
    seeds: Sequence[int] = (0,),
    workers: int = 1,
    chunk_size: int = 16,
    sweeps: Optional[Mapping[str, pd.DataFrame]] = None,
    config: Optional[Mapping[str, object]] = None,
    tpr: float = 0.95,
    numbered: bool = True,
) -> EvalReport:
    """
    Score every task with every method for each seed and write the report.

    ``methods`` maps a name to a factory ``seed -> scorer``. Scorers with a
    ``fit`` method are fitted on the task's training images first.
    """
    started = time.perf_counter()
    if not methods or not tasks:
        raise ValueError("run_benchmark needs at least one method and one task")
    cells: Dict[Cell, List[SeedScores]] = {}
    for seed in seeds:
        noise = KeyedNoise(seed)
        for method, factory in methods.items():
            for task_name, task in tasks.items():
                scorer = factory(seed)
                if hasattr(scorer, "fit"):
                    if task.train_data is None:
                        raise ValueError(f"Method '{method}' needs training data for task '{task_name}'")
                    scorer.fit(task.train_data, noise)
                logger.info(f"Scoring {method} on {task_name} (seed {seed})")
                ood_ids = list(range(len(task.id_data), len(task.id_data) + len(task.ood_data)))
                id_scores = batch_score(task.id_data, scorer, noise, workers, chunk_size)
                ood_scores = batch_score(task.ood_data, scorer, noise, workers, chunk_size, ood_ids)
                cells.setdefault((method, task_name), []).append((seed, id_scores, ood_scores))
    return evaluate_scores(output_dir, cells, sweeps, config, tpr, started, numbered)
