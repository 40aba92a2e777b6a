import numpy as np
import pytest
import torch

from src.distances import DistanceFn, dist_l2
from src.exceptions import ScoreError
from src.preprocessing.pixels import ImageBatch
from src.scoring import (
    CIFAR_ENSEMBLE,
    MSMAScorer,
    PRConfig,
    PRScorer,
    ProjectionScorer,
    ScoreVector,
    batch_score,
    msma_aggregate,
    score_msma,
    score_pr,
    score_pr_ensemble,
    score_projection,
)
from src.utils.keyed_rng import KeyedNoise, NoiseRole

from .conftest import ConstantConsistency, ConstantDenoiser, IdentityConsistency, IdentityDenoiser

SMALL = dict(n_alpha=2, n_beta=3, chunk_size=5)


def pr_oracle(model, x, cfg, noise, sample_ids):
    """Projection Regret with one network call per draw."""
    t = model.schedule.t
    a, b = cfg.alpha, cfg.beta
    shape = tuple(x.shape[1:])
    result = []
    for row, sid in enumerate(sample_ids):
        image = x[row : row + 1]

        def draw(role, k):
            return noise.normal(shape, sid, a, b, int(role), k, dtype=x.dtype).unsqueeze(0)

        def proj(value, index, z):
            return model.consistency_forward(value + t[index] * z, t[index])

        n_total = cfg.n_alpha * cfg.n_beta
        dx = sum(dist_l2(image, proj(image, b, draw(NoiseRole.DX, k))).item() for k in range(n_total)) / n_total
        dy = 0.0
        for j in range(cfg.n_alpha):
            y = proj(image, a, draw(NoiseRole.Y, j))
            for m in range(cfg.n_beta):
                dy += dist_l2(y, proj(y, b, draw(NoiseRole.Y_PROJ, j * cfg.n_beta + m))).item()
        result.append(dx - dy / n_total)
    return result


class TestPRConfig:
    """Test suite for Projection Regret settings"""

    def test_defaults(self):
        cfg = PRConfig()
        assert (cfg.alpha, cfg.beta, cfg.n_alpha, cfg.n_beta) == (9, 8, 40, 10)
        assert cfg.ensemble_C == CIFAR_ENSEMBLE

    @pytest.mark.parametrize("kwargs", [{"n_alpha": 0}, {"n_beta": 0}, {"chunk_size": 0}, {"backend": "single_step"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PRConfig(**kwargs)

    def test_validate_indices(self, schedule):
        with pytest.raises(IndexError):
            PRConfig(alpha=18).validate(schedule)
        with pytest.raises(IndexError):
            PRConfig(ensemble_C=((3, 2), (20, 1))).validate(schedule)

    def test_to_dict(self):
        values = PRConfig(ensemble_C=((2, 1), (3, 3))).to_dict()
        assert values["ensemble_C"] == "2,1;3,3"


class TestProjectionRegret:
    """Test suite for Projection Regret and its ensemble"""

    @pytest.mark.parametrize("n_alpha", [1, 2, 4])
    @pytest.mark.parametrize("n_beta", [1, 2, 4])
    def test_matches_nested_loops(self, tiny_consistency, gray_batch, n_alpha, n_beta):
        cfg = PRConfig(alpha=6, beta=4, n_alpha=n_alpha, n_beta=n_beta, chunk_size=5)
        noise = KeyedNoise(3)
        x = gray_batch.data[:2]
        got = score_pr(tiny_consistency, x, cfg, noise, sample_ids=[7, 8])
        assert got.tolist() == pytest.approx(pr_oracle(tiny_consistency, x, cfg, noise, [7, 8]), abs=1e-6)

    def test_constant_projection_at_anchor_is_zero(self, gray_batch):
        x = gray_batch.data[:1]
        score = score_pr(ConstantConsistency(x), x, PRConfig(**SMALL), KeyedNoise(0))
        assert score.tolist() == [0.0]

    def test_constant_projection_is_distance_to_anchor(self, gray_batch):
        anchor = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        score = score_pr(ConstantConsistency(anchor), gray_batch, PRConfig(**SMALL), KeyedNoise(0))
        assert torch.allclose(score, dist_l2(gray_batch.data, anchor.expand_as(gray_batch.data)))

    def test_zero_distance_gives_zero(self, tiny_consistency, gray_batch):
        zero = DistanceFn("zero", lambda x, y: torch.zeros(x.shape[0], dtype=x.dtype))
        score = score_pr(tiny_consistency, gray_batch, PRConfig(**SMALL), KeyedNoise(0), distance=zero)
        assert torch.equal(score, torch.zeros(4, dtype=torch.float64))

    def test_batch_independent(self, tiny_consistency, gray_batch):
        cfg = PRConfig(**SMALL)
        full = score_pr(tiny_consistency, gray_batch, cfg, KeyedNoise(1), sample_ids=[0, 1, 2, 3])
        single = score_pr(tiny_consistency, gray_batch.data[2:3], cfg, KeyedNoise(1), sample_ids=[2])
        assert full[2].item() == pytest.approx(single.item(), abs=1e-9)

    def test_duplicated_pair_doubles(self, tiny_consistency, gray_batch):
        noise = KeyedNoise(2)
        base = PRConfig(alpha=9, beta=8, **SMALL)
        doubled = score_pr_ensemble(tiny_consistency, gray_batch, PRConfig(ensemble_C=((9, 8), (9, 8)), **SMALL), noise)
        assert torch.equal(doubled, 2 * score_pr(tiny_consistency, gray_batch, base, noise).double())

    def test_ensemble_is_sum(self, tiny_consistency, gray_batch):
        noise = KeyedNoise(2)
        pairs = ((9, 8), (7, 6))
        total = score_pr_ensemble(tiny_consistency, gray_batch, PRConfig(ensemble_C=pairs, **SMALL), noise)
        parts = [score_pr(tiny_consistency, gray_batch, PRConfig(alpha=a, beta=b, **SMALL), noise) for a, b in pairs]
        assert torch.allclose(total, parts[0] + parts[1])

    def test_empty_ensemble(self, tiny_consistency, gray_batch):
        with pytest.raises(ValueError):
            score_pr_ensemble(tiny_consistency, gray_batch, PRConfig(ensemble_C=(), **SMALL), KeyedNoise(0))

    def test_ode_backend(self, tiny_denoiser, gray_batch):
        cfg = PRConfig(alpha=3, beta=2, n_alpha=1, n_beta=2, backend="ode_full")
        score = score_pr(tiny_denoiser, gray_batch, cfg, KeyedNoise(0))
        assert score.shape == (4,) and torch.isfinite(score).all()

    def test_backend_model_mismatch(self, gray_batch):
        with pytest.raises(TypeError):
            score_pr(IdentityDenoiser(), gray_batch, PRConfig(**SMALL), KeyedNoise(0))

    def test_sample_id_count(self, tiny_consistency, gray_batch):
        with pytest.raises(ValueError):
            score_pr(tiny_consistency, gray_batch, PRConfig(**SMALL), KeyedNoise(0), sample_ids=[1])

    def test_spread_shrinks_with_draw_count(self, gray_batch):
        # identity projections: both terms are t_beta^2 times a mean of n_alpha * n_beta chi-square draws
        replicates = 256
        x = gray_batch.data[:1].expand(replicates, -1, -1, -1).contiguous()
        ids = list(range(replicates))
        counts, spreads = [], []
        for n_alpha, n_beta in [(1, 1), (2, 2), (4, 4), (8, 8)]:
            cfg = PRConfig(alpha=9, beta=8, n_alpha=n_alpha, n_beta=n_beta, chunk_size=512)
            scores = score_pr(IdentityConsistency(), x, cfg, KeyedNoise(6), sample_ids=ids)
            counts.append(n_alpha * n_beta)
            spreads.append(scores.std().item())
        slope = np.polyfit(np.log(counts), np.log(spreads), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1)


class TestReconstructionScores:
    """Test suite for single-projection reconstruction errors and MSMA"""

    def test_identity_projection_error(self, gray_batch):
        noise = KeyedNoise(4)
        t0 = IdentityConsistency().schedule.t[0]
        score = score_projection(IdentityConsistency(), gray_batch, 0, "l2", 5, noise, sample_ids=[0, 1, 2, 3])
        z = noise.draws((1, 8, 8), (1, 0, 0, int(NoiseRole.PROJ)), 5, dtype=torch.float64)
        expected = t0 ** 2 * (z ** 2).flatten(1).sum(dim=1).mean().item()
        assert score[1].item() == pytest.approx(expected, rel=1e-9)
        assert score[1].item() == pytest.approx(t0 ** 2 * 64, rel=0.5)

    def test_identity_projection_mean_at_smallest_level(self, gray_batch):
        # ||z||^2 is chi-square with 64 degrees of freedom: mean 64, variance 128
        n, t0 = 1000, IdentityConsistency().schedule.t[0]
        score = score_projection(IdentityConsistency(), gray_batch, 0, "l2", n, KeyedNoise(7))
        standard_error = t0 ** 2 * np.sqrt(128 / (n * len(score)))
        assert abs(score.mean().item() - t0 ** 2 * 64) < 3 * standard_error

    def test_single_mode_needs_denoiser(self, gray_batch):
        with pytest.raises(TypeError):
            score_projection(IdentityConsistency(), gray_batch, 3, "l2", 2, KeyedNoise(0), mode="single")

    def test_full_mode_with_denoiser_uses_ode(self, gray_batch):
        score = score_projection(IdentityDenoiser(), gray_batch, 3, "l2", 2, KeyedNoise(0), mode="full")
        assert score.shape == (4,) and (score > 0).all()

    def test_unknown_mode(self, gray_batch):
        with pytest.raises(ValueError):
            score_projection(IdentityDenoiser(), gray_batch, 3, "l2", 2, KeyedNoise(0), mode="half")

    def test_msma_perfect_denoiser_on_zeros(self):
        x = torch.zeros(2, 1, 8, 8, dtype=torch.float64)
        vectors = score_msma(ConstantDenoiser(0.0), x, [2, 5, 9], 3, KeyedNoise(0))
        assert vectors.shape == (2, 3)
        assert torch.equal(vectors, torch.zeros(2, 3, dtype=torch.float64))

    def test_msma_identity_denoiser_is_noise_norm(self, gray_batch):
        vectors = score_msma(IdentityDenoiser(), gray_batch, [4], 50, KeyedNoise(0))
        assert vectors.mean().item() == pytest.approx(64.0, rel=0.2)

    def test_msma_identity_denoiser_mean(self, gray_batch):
        n = 1000
        vectors = score_msma(IdentityDenoiser(), gray_batch, [4], n, KeyedNoise(8))
        standard_error = np.sqrt(128 / (n * vectors.numel()))
        assert abs(vectors.mean().item() - 64.0) < 3 * standard_error

    def test_mahalanobis_at_mean_is_zero(self):
        train = np.random.default_rng(0).normal(size=(50, 3))
        distances = msma_aggregate(train, train.mean(axis=0, keepdims=True))
        assert distances[0] == pytest.approx(0.0, abs=1e-6)

    def test_mahalanobis_shrinkage(self):
        # zero covariance: only the 1e-3 ridge remains
        distances = msma_aggregate(np.zeros((5, 2)), np.array([[1.0, 0.0], [0.0, 2.0]]))
        assert distances.tolist() == pytest.approx([np.sqrt(1e3), 2 * np.sqrt(1e3)])

    def test_mahalanobis_dimension_mismatch(self):
        with pytest.raises(ValueError):
            msma_aggregate(np.zeros((5, 2)), np.zeros((1, 3)))

    def test_msma_scorer_needs_fit(self, gray_batch):
        scorer = MSMAScorer(IdentityDenoiser(), [2, 4], n=2)
        with pytest.raises(ScoreError):
            scorer(gray_batch.data, [0, 1, 2, 3], KeyedNoise(0))
        scorer.fit(gray_batch, KeyedNoise(0))
        assert scorer(gray_batch.data, [0, 1, 2, 3], KeyedNoise(0)).shape == (4,)


class TestBatchScore:
    """Test suite for chunked and parallel scoring"""

    @pytest.fixture
    def scorer(self, tiny_consistency):
        return PRScorer(tiny_consistency, PRConfig(**SMALL))

    def test_single_sample(self, scorer, gray_batch):
        result = batch_score(gray_batch.subset([0]), scorer, KeyedNoise(0))
        assert len(result) == 1
        assert result.metric == "l2" and result.seed == 0

    def test_parallel_matches_serial(self, scorer, gray_batch):
        serial = batch_score(gray_batch, scorer, KeyedNoise(5), workers=1, chunk_size=2)
        parallel = batch_score(gray_batch, scorer, KeyedNoise(5), workers=3, chunk_size=2)
        assert np.array_equal(serial.scores, parallel.scores)
        assert serial.config_hash == parallel.config_hash

    def test_chunk_size_does_not_matter(self, scorer, gray_batch):
        whole = batch_score(gray_batch, scorer, KeyedNoise(5), chunk_size=4)
        pieces = batch_score(gray_batch, scorer, KeyedNoise(5), chunk_size=1)
        assert np.allclose(whole.scores, pieces.scores, atol=1e-9)

    def test_permutation_equivariance(self, scorer, gray_batch):
        order = [2, 0, 3, 1]
        base = batch_score(gray_batch, scorer, KeyedNoise(5))
        permuted = batch_score(gray_batch.subset(order), scorer, KeyedNoise(5), sample_ids=order)
        assert np.allclose(permuted.scores, base.scores[order], atol=1e-9)

    def test_non_finite_names_sample(self, gray_batch):
        def scorer(x, sample_ids, noise):
            return torch.tensor([float("nan") if sid == 2 else 0.0 for sid in sample_ids])

        with pytest.raises(ScoreError) as info:
            batch_score(gray_batch, scorer, KeyedNoise(0), chunk_size=3)
        assert info.value.sample_index == 2

    def test_projection_scorer_config(self, gray_batch):
        scorer = ProjectionScorer(IdentityConsistency(), index=3, n=2)
        result = batch_score(gray_batch, scorer, KeyedNoise(0))
        other = batch_score(gray_batch, ProjectionScorer(IdentityConsistency(), index=4, n=2), KeyedNoise(0))
        assert result.config_hash != other.config_hash

    def test_invalid_arguments(self, scorer, gray_batch):
        with pytest.raises(ValueError):
            batch_score(gray_batch, scorer, KeyedNoise(0), workers=0)


class TestScoreVector:
    """Test suite for saved score vectors"""

    def test_save_and_load(self, tmp_path):
        vector = ScoreVector(np.array([0.5, -1.25, 3.0]), config_hash="abc", seed=4, metric="l2", extras={"task": "toy"})
        path = vector.save(tmp_path / "scores.prtc")
        assert ScoreVector.manifest_path(path).exists()
        loaded = ScoreVector.load(path)
        assert np.array_equal(loaded.scores, vector.scores)
        assert (loaded.config_hash, loaded.seed, loaded.metric) == ("abc", 4, "l2")
        assert loaded.extras == {"task": "toy"}

    def test_rejects_non_finite(self):
        with pytest.raises(ScoreError) as info:
            ScoreVector(np.array([0.0, np.inf]))
        assert info.value.sample_index == 1

    def test_rejects_matrix(self):
        with pytest.raises(ValueError):
            ScoreVector(np.zeros((2, 2)))
