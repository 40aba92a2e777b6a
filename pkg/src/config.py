"""Flat run configuration: schema, file parsing, flag overrides and the resolved record."""

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import torch

from .exceptions import ConfigError
from .models.network import UNetConfig
from .models.training import TrainingConfig
from .scoring import PRConfig
from .toy_dataset import ToySpec
from .utils.logger import get_logger
from .utils.provenance import code_version

logger = get_logger(__name__)

RESOLVED_FILE = "config.resolved.txt"
SEED_ENV = "PR_SEED"
TOY_SPLITS = ("train", "id", "ood")


@dataclass(frozen=True)
class ConfigKey:
    name: str
    kind: str
    default: Any
    help: str = ""


def _key(name: str, kind: str, default: Any, help: str = "") -> ConfigKey:
    return ConfigKey(name, kind, default, help)


SCHEMA: Tuple[ConfigKey, ...] = (
    # run
    _key("seed", "int", 0, "Global seed (PR_SEED overrides)"),
    _key("seeds", "ints", [0], "Seeds averaged by evaluate (PR_SEED overrides)"),
    _key("output_dir", "str", "runs", "Directory receiving outputs"),
    _key("workers", "int", 1, "Scoring threads"),
    _key("chunk_size", "int", 16, "Images per scoring chunk"),
    _key("dtype", "str", "float32", "float32 or float64"),
    _key("device", "str", "cpu", "Torch device"),
    _key("plot", "bool", False, "Also write plots"),
    # data
    _key("train_dir", "str", "", "Training image folder"),
    _key("id_dir", "str", "", "In-distribution test image folder"),
    _key("ood_dir", "str", "", "Out-of-distribution test image folder"),
    _key("resolution", "int", 24, "Image side length"),
    _key("channels", "int", 3, "1 or 3"),
    _key("toy", "bool", False, "Use the synthetic toy benchmark instead of folders"),
    _key("toy_classes", "int", 3, "Toy semantic classes"),
    _key("toy_textures", "int", 4, "Toy background textures"),
    _key("toy_samples_per_class", "int", 256, "Toy images per class"),
    _key("toy_id_classes", "int", 2, "Toy classes treated as in-distribution"),
    _key("toy_test_fraction", "float", 0.25, "Share of toy ID images held out for testing"),
    # network
    _key("unet_base_channels", "int", 32),
    _key("unet_channel_multipliers", "ints", [1, 2, 2]),
    _key("unet_res_blocks", "int", 1),
    _key("unet_embedding_channels", "int", 0, "0 means 4 * base channels"),
    # training
    _key("steps", "int", 2000),
    _key("batch_size", "int", 32),
    _key("lr", "float", 1e-4),
    _key("sigma_data", "float", 0.5),
    _key("schedule_N", "int", 17),
    _key("schedule_eps", "float", 0.002),
    _key("schedule_T", "float", 80.0),
    _key("schedule_rho", "float", 7.0),
    _key("weighted", "bool", False, "EDM loss weighting"),
    _key("sigma_sampling", "str", "lognormal", "lognormal or uniform"),
    _key("ema_decay", "float", 0.99),
    _key("train_distance", "str", "l2", "Distance inside the consistency objective"),
    _key("log_every", "int", 100),
    _key("grad_clip", "float", 0.0, "0 disables clipping"),
    _key("teacher", "str", "", "Denoiser checkpoint for distillation"),
    # scoring
    _key("checkpoint", "str", "", "Model checkpoint used for scoring"),
    _key("denoiser", "str", "", "Denoiser checkpoint (msma, single-step sweeps)"),
    _key("method", "str", "pr", "pr, pr-ensemble, proj or msma"),
    _key("methods", "strs", ["pr"], "Methods compared by evaluate"),
    _key("metric", "str", "l2", "l2, ssim, perceptual or unet"),
    _key("alpha", "int", 9),
    _key("beta", "int", 8),
    _key("n_alpha", "int", 40),
    _key("n_beta", "int", 10),
    _key("ensemble_C", "pairs", [(7, 6), (7, 7), (8, 7), (8, 8), (9, 8), (9, 9), (10, 9), (10, 10)]),
    _key("backend", "str", "cm_full", "cm_full or ode_full"),
    _key("index", "int", 5, "Timestep index of the plain reconstruction score"),
    _key("proj_mode", "str", "full", "single or full"),
    _key("n", "int", 10, "Draws of the reconstruction and MSMA scores"),
    _key("msma_indices", "ints", [1, 3, 5, 7, 9]),
    _key("gamma", "int", 3, "Timestep index of the U-Net distance"),
    _key("n_z", "int", 1, "Draws of the U-Net distance"),
    _key("extractor", "str", "", "Feature extractor checkpoint for the perceptual distance"),
    _key("input_dir", "str", "", "Images scored by the score command"),
    _key("split", "str", "id", "Toy split scored by the score command: train, id or ood"),
    # evaluation
    _key("task", "str", "id_vs_ood"),
    _key("tpr", "float", 0.95),
    _key("id_scores", "strs", [], "ID score files evaluated directly"),
    _key("ood_scores", "strs", [], "OOD score files evaluated directly"),
    _key("variants", "strs", ["single_l2", "single_perceptual", "full_l2", "full_perceptual"]),
    _key("grid", "pairs", [(7, 6), (7, 7), (8, 7), (8, 8), (9, 8), (9, 9), (10, 9), (10, 10)]),
    _key("ensemble_radius", "int", 1),
)

SCHEMA_BY_NAME: Dict[str, ConfigKey] = {k.name: k for k in SCHEMA}


def _parse_value(key: ConfigKey, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key.kind == "int":
            return int(text)
        if key.kind == "float":
            return float(text)
        if key.kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: '{text}'")
        if key.kind == "str":
            return text
        items = [item.strip() for item in text.split(",") if item.strip()]
        if key.kind == "ints":
            return [int(item) for item in items]
        if key.kind == "strs":
            return items
        if key.kind == "pairs":
            pairs = []
            for item in items:
                a, sep, b = item.partition(":")
                if not sep:
                    raise ValueError(f"pair '{item}' must look like a:b")
                pairs.append((int(a), int(b)))
            return pairs
    except ValueError as e:
        raise ConfigError(f"Bad value for '{key.name}': {e}") from e
    raise ConfigError(f"Unknown kind '{key.kind}' for '{key.name}'")


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(f"{v[0]}:{v[1]}" if isinstance(v, tuple) else str(v) for v in value)
    return str(value)


def parse_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    entries: Dict[str, str] = {}
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{number}: expected 'key = value'")
        entries[key.strip()] = value.strip()
    return entries


class RunConfig:
    """
    Resolved configuration: schema defaults, then the config file, then
    command-line overrides, then ``PR_SEED``.
    """

    def __init__(self, values: Optional[Mapping[str, Any]] = None) -> None:
        values = dict(values or {})
        unknown = sorted(set(values) - set(SCHEMA_BY_NAME))
        if unknown:
            msg = f"Unknown config keys: {', '.join(unknown)}"
            logger.error(msg)
            raise ConfigError(msg)
        resolved = {k.name: k.default for k in SCHEMA}
        for name, raw in values.items():
            resolved[name] = _parse_value(SCHEMA_BY_NAME[name], raw)
        object.__setattr__(self, "_values", resolved)
        self._check()

    @classmethod
    def from_sources(
        cls,
        path: Optional[Union[str, Path]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        environ: Optional[Mapping[str, str]] = None,
    ) -> "RunConfig":
        values: Dict[str, Any] = {}
        if path:
            values.update(parse_config_file(path))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        environ = os.environ if environ is None else environ
        if environ.get(SEED_ENV):
            # a pinned seed also pins the seeds evaluate averages over
            values["seed"] = environ[SEED_ENV]
            values["seeds"] = environ[SEED_ENV]
        return cls(values)

    def _check(self) -> None:
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got '{self.dtype}'")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.split not in TOY_SPLITS:
            raise ConfigError(f"split must be one of {', '.join(TOY_SPLITS)}, got '{self.split}'")

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get("_values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("RunConfig is immutable; use replace()")

    def replace(self, **changes: Any) -> "RunConfig":
        values = dict(self._values)
        values.update(changes)
        return RunConfig(values)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def canonical_text(self) -> str:
        return "".join(f"{name} = {_format_value(self._values[name])}\n" for name in sorted(self._values))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def write_resolved(self, directory: Union[str, Path]) -> Path:
        """Write every resolved key plus ``code_version`` and ``config_hash``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_FILE
        header = f"# code_version = {code_version()}\n# config_hash = {self.config_hash}\n"
        path.write_text(header + self.canonical_text(), encoding="utf-8")
        return path

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            base_channels=self.unet_base_channels,
            channel_multipliers=tuple(self.unet_channel_multipliers),
            n_res_blocks_per_stage=self.unet_res_blocks,
            in_channels=self.channels,
            resolution=self.resolution,
            seed=self.seed,
            embedding_channels=self.unet_embedding_channels or None,
        )

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            unet=self.unet_config(),
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            sigma_data=self.sigma_data,
            schedule_N=self.schedule_N,
            schedule_eps=self.schedule_eps,
            schedule_T=self.schedule_T,
            schedule_rho=self.schedule_rho,
            weighted=self.weighted,
            sigma_sampling=self.sigma_sampling,
            ema_decay=self.ema_decay,
            distance=self.train_distance,
            log_every=self.log_every,
            grad_clip=self.grad_clip or None,
            dtype=self.torch_dtype,
            device=self.device,
        )

    def pr_config(self) -> PRConfig:
        return PRConfig(
            alpha=self.alpha,
            beta=self.beta,
            n_alpha=self.n_alpha,
            n_beta=self.n_beta,
            ensemble_C=tuple(self.ensemble_C),
            distance=self.metric,
            backend=self.backend,
            chunk_size=self.chunk_size,
        )

    def toy_spec(self) -> ToySpec:
        return ToySpec(
            resolution=self.resolution,
            n_semantic_classes=self.toy_classes,
            n_background_textures=self.toy_textures,
            samples_per_class=self.toy_samples_per_class,
            seed=self.seed,
            channels=self.channels,
        )

    def __repr__(self) -> str:
        return f"RunConfig(hash={self.config_hash[:12]})"


def schema_help() -> List[Tuple[str, str, str]]:
    """(name, kind, help) of every config key, in schema order."""
    return [(k.name, k.kind, k.help) for k in SCHEMA]
