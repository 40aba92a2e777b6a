from dataclasses import replace

import pytest
import torch
import torch.nn as nn

from src.models.checkpoint import load_checkpoint, load_consistency, load_denoiser, save_checkpoint
from src.models.consistency import (
    ConsistencyModel,
    cd_loss,
    cm_loss,
    consistency_preconditioning,
    train_consistency,
)
from src.models.diffusion import DenoiserModel
from src.models.network import init_unet
from src.models.training import TrainingConfig
from src.distances import dist_l2

from .conftest import IdentityConsistency, IdentityDenoiser, assert_gradients_match


class ScaledConsistency(nn.Module):
    """f(x, t) = w x / (1 + t) with a single trainable weight."""

    def __init__(self, w: float, schedule) -> None:
        super().__init__()
        self.w = nn.Parameter(torch.tensor(w, dtype=torch.float64))
        self.schedule = schedule

    def consistency_forward(self, x, t, return_features=False):
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1, *([1] * (x.dim() - 1)))
        return self.w * x / (1 + t)


class TestConsistencyModel:
    """Test suite for the consistency function"""

    def test_boundary_condition_is_exact(self, tiny_consistency, gray_batch):
        out = tiny_consistency.consistency_forward(gray_batch.data, tiny_consistency.eps)
        assert torch.equal(out, gray_batch.data)

    def test_boundary_preconditioning(self):
        t = torch.tensor([0.002], dtype=torch.float64)
        c_skip, c_out, _, _ = consistency_preconditioning(t, 0.5, 0.002)
        assert c_skip.item() == 1.0
        assert c_out.item() == 0.0

    def test_rejects_t_below_eps(self, tiny_consistency, gray_batch):
        with pytest.raises(ValueError):
            tiny_consistency.consistency_forward(gray_batch.data, 0.001)

    def test_returns_features(self, small_consistency, rgb_batch):
        out, features = small_consistency.consistency_forward(rgb_batch.data, 0.06, return_features=True)
        assert out.shape == rgb_batch.data.shape
        assert len(features) == 2


class TestConsistencyLosses:
    """Test suite for consistency training and distillation objectives"""

    def test_cm_loss_identity_models(self, gray_batch):
        # f = identity: d(x + t_i z, x + t_{i+1} z) = (t_{i+1} - t_i)^2 * sum z^2
        model = IdentityConsistency()
        t = model.schedule.t
        noise = torch.ones_like(gray_batch.data)
        indices = torch.tensor([0, 3, 3, 10])
        loss = cm_loss(model, model, gray_batch, dist_l2, None, indices=indices, noise=noise)
        expected = sum((t[i + 1] - t[i]) ** 2 * 64 for i in indices.tolist()) / 4
        assert loss.item() == pytest.approx(expected)

    def test_cd_loss_with_identity_teacher(self, gray_batch):
        # identity teacher has zero drift, so the Heun step does not move x
        model = IdentityConsistency()
        noise = torch.ones_like(gray_batch.data)
        indices = torch.tensor([2, 2, 2, 2])
        loss = cd_loss(model, model, IdentityDenoiser(), gray_batch, dist_l2, None, indices=indices, noise=noise)
        assert loss.item() == pytest.approx(0.0)

    def test_no_gradient_through_target(self, tiny_consistency, gray_batch):
        target = tiny_consistency
        online = tiny_consistency.__class__(init_unet(tiny_consistency.cfg), tiny_consistency.schedule).double()
        loss = cm_loss(online, target, gray_batch, dist_l2, torch.Generator().manual_seed(0))
        loss.backward()
        assert all(p.grad is None for p in target.parameters())
        assert any(p.grad is not None for p in online.parameters())

    def test_distillation_starts_from_teacher(self, tiny_unet_cfg, gray_batch):
        teacher = DenoiserModel(init_unet(tiny_unet_cfg), TrainingConfig(unet=tiny_unet_cfg).schedule())
        cfg = TrainingConfig(unet=tiny_unet_cfg, steps=0, log_every=0)
        student = train_consistency(cfg, gray_batch, teacher=teacher)
        for a, b in zip(student.net.parameters(), teacher.net.parameters()):
            assert torch.equal(a, b)

    def test_training_runs_and_is_deterministic(self, tiny_unet_cfg, gray_batch):
        cfg = TrainingConfig(unet=tiny_unet_cfg, steps=2, batch_size=2, log_every=0, dtype=torch.float64)
        first = train_consistency(cfg, gray_batch)
        second = train_consistency(cfg, gray_batch)
        assert first.history.losses == second.history.losses
        assert len(first.history.losses) == 2

    def test_teacher_schedule_must_match(self, tiny_unet_cfg, gray_batch):
        teacher = DenoiserModel(init_unet(tiny_unet_cfg), TrainingConfig(unet=tiny_unet_cfg, schedule_N=10).schedule())
        with pytest.raises(ValueError, match="schedule"):
            train_consistency(TrainingConfig(unet=tiny_unet_cfg, steps=1), gray_batch, teacher=teacher)

    @pytest.fixture
    def online_target(self, tiny_unet_cfg, schedule):
        online = ConsistencyModel(init_unet(tiny_unet_cfg), schedule).double().eval()
        target = ConsistencyModel(init_unet(replace(tiny_unet_cfg, seed=1)), schedule).double().eval()
        target.requires_grad_(False)
        return online, target

    def test_cm_loss_hand_computed(self, schedule):
        x = torch.tensor([[[[0.5, -1.0], [0.0, 1.0]]], [[[-0.5, 0.25], [1.0, -0.75]]]], dtype=torch.float64)
        noise = torch.full_like(x, 0.5)
        online, target = ScaledConsistency(2.0, schedule), ScaledConsistency(1.5, schedule)
        t = schedule.t
        expected, expected_grad = 0.0, 0.0
        for b, i in enumerate([0, 4]):
            inputs_cur, inputs_next = x[b] + t[i] * noise[b], x[b] + t[i + 1] * noise[b]
            anchor = 1.5 * inputs_cur / (1 + t[i])
            prediction = 2.0 * inputs_next / (1 + t[i + 1])
            expected += ((anchor - prediction) ** 2).sum().item() / 2
            expected_grad += (2 * (prediction - anchor) * inputs_next / (1 + t[i + 1])).sum().item() / 2

        loss = cm_loss(online, target, x, dist_l2, None, indices=torch.tensor([0, 4]), noise=noise)
        loss.backward()
        assert loss.item() == pytest.approx(expected, rel=1e-12)
        assert online.w.grad.item() == pytest.approx(expected_grad, rel=1e-12)
        assert target.w.grad is None

    def test_cm_loss_gradient_matches_finite_differences(self, online_target, gray_batch):
        online, target = online_target
        noise = torch.randn(gray_batch.data.shape, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        indices = torch.tensor([0, 3, 8, 15])

        def loss_fn():
            return cm_loss(online, target, gray_batch, dist_l2, None, indices=indices, noise=noise)

        assert_gradients_match(loss_fn, online)

    def test_cd_loss_gradient_matches_finite_differences(self, online_target, tiny_denoiser, gray_batch):
        online, target = online_target
        tiny_denoiser.requires_grad_(False)
        noise = torch.randn(gray_batch.data.shape, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
        indices = torch.tensor([1, 5, 9, 16])

        def loss_fn():
            return cd_loss(online, target, tiny_denoiser, gray_batch, dist_l2, None, indices=indices, noise=noise)

        assert_gradients_match(loss_fn, online)


class TestCheckpoint:
    """Test suite for model checkpoints"""

    def test_roundtrip_preserves_outputs(self, tiny_consistency, gray_batch, tmp_path):
        save_checkpoint(tiny_consistency, tmp_path / "cm")
        loaded = load_consistency(tmp_path / "cm")
        assert loaded.cfg == tiny_consistency.cfg
        assert loaded.schedule == tiny_consistency.schedule
        x = gray_batch.data
        assert torch.equal(loaded.consistency_forward(x, 0.5), tiny_consistency.consistency_forward(x, 0.5))

    def test_kind_is_checked(self, tiny_denoiser, tmp_path):
        save_checkpoint(tiny_denoiser, tmp_path / "dn")
        assert load_checkpoint(tmp_path / "dn").kind == "denoiser"
        assert isinstance(load_denoiser(tmp_path / "dn"), DenoiserModel)
        with pytest.raises(ValueError):
            load_consistency(tmp_path / "dn")

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing")
