import argparse
import sys
from typing import Dict, List, Optional, Type

from .config import RunConfig, schema_help
from .pipeline.base_pipeline import BasePipeline
from .pipeline.evaluation_pipeline import EvaluationPipeline, SelectionPipeline, SweepPipeline, ToyExportPipeline
from .pipeline.scoring_pipeline import ScoringPipeline
from .pipeline.training_pipeline import DiffusionTrainingPipeline, DistillationPipeline
from .utils.logger import get_logger

logger = get_logger(__name__)

COMMANDS: Dict[str, Type[BasePipeline]] = {
    "train-diffusion": DiffusionTrainingPipeline,
    "distill": DistillationPipeline,
    "score": ScoringPipeline,
    "evaluate": EvaluationPipeline,
    "sweep": SweepPipeline,
    "select-hparams": SelectionPipeline,
    "make-toy": ToyExportPipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="projection-regret", description="Diffusion-based novelty detection")
    commands = parser.add_subparsers(dest="command", required=True)
    for command, pipeline in COMMANDS.items():
        sub = commands.add_parser(command, help=(pipeline.__doc__ or "").strip())
        sub.add_argument("--config", default=None, help="Plain-text 'key = value' config file")
        for name, kind, help_text in schema_help():
            sub.add_argument(f"--{name}", dest=name, default=None, help=f"[{kind}] {help_text}".strip())
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    try:
        cfg = RunConfig.from_sources(args.config, overrides)
        result = COMMANDS[args.command](cfg).run()
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        message = str(e).splitlines()[0] if str(e) else ""
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1

    if isinstance(result, tuple):
        print(" ".join(str(v) for v in result))
    elif hasattr(result, "directory"):
        print(result.directory)
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
