import pytest
import torch

from src.config import RESOLVED_FILE, RunConfig, parse_config_file, schema_help
from src.exceptions import ConfigError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# toy run\n"
        "seed = 3\n"
        "alpha = 10   # outer level\n"
        "ensemble_C = 9:8, 10:9\n"
        "toy = yes\n"
        "methods = pr,msma\n",
        encoding="utf-8",
    )
    return path


class TestRunConfig:
    """Test suite for configuration resolution"""

    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.alpha, cfg.beta, cfg.n_alpha, cfg.n_beta) == (9, 8, 40, 10)
        assert cfg.schedule_N == 17 and cfg.metric == "l2"
        assert cfg.ensemble_C[0] == (7, 6)

    def test_file_values_are_parsed(self, config_file):
        cfg = RunConfig.from_sources(config_file, environ={})
        assert cfg.seed == 3 and cfg.alpha == 10
        assert cfg.ensemble_C == [(9, 8), (10, 9)]
        assert cfg.toy is True
        assert cfg.methods == ["pr", "msma"]

    def test_precedence(self, config_file):
        cfg = RunConfig.from_sources(config_file, {"alpha": "11", "beta": None}, environ={"PR_SEED": "42"})
        assert cfg.alpha == 11
        assert cfg.beta == 8
        assert cfg.seed == 42
        assert cfg.seeds == [42]

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("alpah = 9\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="alpah"):
            RunConfig.from_sources(path, environ={})

    @pytest.mark.parametrize(
        "values",
        [
            {"alpha": "nine"},
            {"toy": "maybe"},
            {"grid": "9-8"},
            {"channels": "2"},
            {"dtype": "float16"},
            {"seed": "-1"},
            {"split": "test"},
        ],
    )
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            RunConfig(values)

    def test_missing_file_and_bad_line(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config_file(tmp_path / "missing.cfg")
        path = tmp_path / "broken.cfg"
        path.write_text("alpha 9\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            parse_config_file(path)

    def test_immutable_and_replace(self):
        cfg = RunConfig()
        with pytest.raises(AttributeError):
            cfg.alpha = 3
        changed = cfg.replace(alpha=3)
        assert changed.alpha == 3 and cfg.alpha == 9

    def test_hash_tracks_values(self):
        assert RunConfig().config_hash == RunConfig().config_hash
        assert RunConfig().config_hash != RunConfig({"n_beta": 11}).config_hash
        assert RunConfig({"alpha": "9"}).config_hash == RunConfig().config_hash

    def test_write_resolved(self, tmp_path):
        cfg = RunConfig({"metric": "ssim"})
        path = cfg.write_resolved(tmp_path)
        text = path.read_text(encoding="utf-8")
        assert path.name == RESOLVED_FILE
        assert text.startswith("# code_version = ")
        assert f"# config_hash = {cfg.config_hash}" in text
        assert "metric = ssim\n" in text
        assert "ensemble_C = 7:6,7:7" in text
        assert parse_config_file(path)["metric"] == "ssim"

    def test_derived_configs(self):
        cfg = RunConfig({"channels": "1", "resolution": "8", "dtype": "float64", "unet_channel_multipliers": "1", "grad_clip": "0"})
        training = cfg.training_config()
        assert training.unet.in_channels == 1 and training.unet.resolution == 8
        assert training.dtype == torch.float64 and training.grad_clip is None
        assert cfg.pr_config().ensemble_C == tuple(cfg.ensemble_C)
        assert cfg.toy_spec().channels == 1

    def test_schema_help_lists_every_key(self):
        names = [name for name, _, _ in schema_help()]
        assert "alpha" in names and "ensemble_C" in names
        assert len(names) == len(set(names))
