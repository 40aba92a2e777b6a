import pytest
import torch
import torch.nn as nn

from src.models.network import (
    UNetConfig,
    count_parameters,
    ema_update,
    ema_update_,
    init_unet,
    sinusoidal_embedding,
    unet_forward,
)


class TestUNet:
    """Test suite for the timestep-conditioned U-Net"""

    def test_output_and_feature_shapes(self, small_unet_cfg):
        net = init_unet(small_unet_cfg)
        x = torch.zeros(2, 3, 8, 8)
        out, features = unet_forward(net, x, torch.zeros(2))
        assert out.shape == x.shape
        # coarsest stage first
        assert [tuple(f.shape) for f in features] == [(2, 16, 4, 4), (2, 8, 8, 8)]

    def test_deterministic_initialisation(self, tiny_unet_cfg):
        first, second = init_unet(tiny_unet_cfg), init_unet(tiny_unet_cfg)
        for a, b in zip(first.state_dict().values(), second.state_dict().values()):
            assert torch.equal(a, b)

    def test_initialisation_leaves_global_rng_alone(self, tiny_unet_cfg):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        init_unet(tiny_unet_cfg)
        assert torch.equal(torch.rand(3), expected)

    def test_tiny_config_is_small(self, tiny_unet_cfg):
        assert count_parameters(init_unet(tiny_unet_cfg)) < 5000

    def test_batch_independence(self, small_unet_cfg):
        net = init_unet(small_unet_cfg).double()
        x = torch.randn(3, 3, 8, 8, dtype=torch.float64)
        c = torch.tensor([0.1, -0.3, 0.7], dtype=torch.float64)
        full, _ = net(x, c)
        single, _ = net(x[1:2], c[1:2])
        assert torch.allclose(full[1:2], single, atol=1e-10)

    def test_shape_checks(self, tiny_unet_cfg):
        net = init_unet(tiny_unet_cfg)
        with pytest.raises(ValueError):
            unet_forward(net, torch.zeros(1, 3, 8, 8), torch.zeros(1))
        with pytest.raises(ValueError):
            unet_forward(net, torch.zeros(2, 1, 8, 8), torch.zeros(3))

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"base_channels": 4},
            {"channel_multipliers": ()},
            {"in_channels": 2},
            {"resolution": 10, "channel_multipliers": (1, 2, 2)},
        ],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            UNetConfig(**kwargs)

    def test_config_dict_roundtrip(self, small_unet_cfg):
        as_text = {k: str(v) for k, v in small_unet_cfg.to_dict().items()}
        assert UNetConfig.from_dict(as_text) == small_unet_cfg
        default = UNetConfig()
        assert UNetConfig.from_dict({k: str(v) for k, v in default.to_dict().items()}) == default

    def test_sinusoidal_embedding_shape(self):
        emb = sinusoidal_embedding(torch.tensor([0.0, 1.0]), 8)
        assert emb.shape == (2, 8)


class TestEMA:
    """Test suite for exponential moving averages"""

    def test_ema_formula(self):
        target = {"w": torch.tensor([1.0, 2.0])}
        online = {"w": torch.tensor([3.0, 6.0])}
        updated = ema_update(target, online, 0.75)
        assert torch.allclose(updated["w"], torch.tensor([1.5, 3.0]))

    def test_ema_extremes(self):
        target = {"w": torch.tensor([1.0])}
        online = {"w": torch.tensor([5.0])}
        assert ema_update(target, online, 1.0)["w"].item() == 1.0
        assert ema_update(target, online, 0.0)["w"].item() == 5.0

    def test_ema_rejects_bad_decay(self):
        with pytest.raises(ValueError):
            ema_update({"w": torch.zeros(1)}, {"w": torch.zeros(1)}, 1.5)

    def test_ema_rejects_mismatched_names(self):
        with pytest.raises(ValueError):
            ema_update({"w": torch.zeros(1)}, {"v": torch.zeros(1)}, 0.5)

    def test_in_place_matches_functional(self, tiny_unet_cfg):
        target, online = init_unet(tiny_unet_cfg), init_unet(UNetConfig(**{**tiny_unet_cfg.__dict__, "seed": 9}))
        expected = ema_update(dict(target.named_parameters()), dict(online.named_parameters()), 0.9)
        ema_update_(target, online, 0.9)
        for name, value in target.named_parameters():
            assert torch.allclose(value, expected[name])

    def test_in_place_trajectory(self):
        target, online = nn.Linear(1, 1, bias=False).double(), nn.Linear(1, 1, bias=False).double()
        nn.init.constant_(target.weight, 1.0)
        mu, steps = 0.9, [2.0, -1.0, 4.0, 0.5, 3.0]
        for value in steps:
            nn.init.constant_(online.weight, value)
            ema_update_(target, online, mu)
        k = len(steps)
        expected = mu ** k * 1.0 + (1 - mu) * sum(mu ** (k - 1 - j) * v for j, v in enumerate(steps))
        assert target.weight.item() == pytest.approx(expected, rel=1e-12)
