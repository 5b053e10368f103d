import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msgdn.errors import ConfigError, ShapeError
from msgdn.losses import (FeatureExtractor, FeatureExtractorSpec, HybridLossWeights, combine_losses,
                          hybrid_loss, l1_loss, mse_loss, perceptual_loss, psnr)


@pytest.fixture(scope="module")
def extractor(vgg_weights):
    return FeatureExtractor(FeatureExtractorSpec(str(vgg_weights), tap_layer="conv2_2"))


def test_l1_basics():
    x = torch.rand(2, 3, 4, 4)
    assert l1_loss(x, x).item() == 0
    assert l1_loss(x, x + 0.1).item() == pytest.approx(0.1, abs=1e-6)


def test_l1_hand_sum():
    a = torch.tensor([[[[0.1, 0.5], [0.9, 0.3]]]], dtype=torch.float64)
    b = torch.tensor([[[[0.4, 0.5], [0.2, 1.0]]]], dtype=torch.float64)
    assert l1_loss(a, b).item() == pytest.approx((0.3 + 0.0 + 0.7 + 0.7) / 4, abs=1e-15)


def test_l1_tie_subgradient_zero():
    a = torch.tensor([0.5, 0.2], dtype=torch.float64, requires_grad=True)
    l1_loss(a, torch.tensor([0.5, 0.0], dtype=torch.float64)).backward()
    assert a.grad.tolist() == [0.0, 0.5]


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 5))
    with pytest.raises(ShapeError):
        mse_loss(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 5, 4))


class TestPSNR:
    def test_identical(self):
        x = torch.rand(1, 3, 8, 8)
        assert mse_loss(x, x).item() == 0
        assert psnr(0.0) == math.inf

    def test_values(self):
        assert psnr(1.0, 255) == pytest.approx(10 * math.log10(255 ** 2), abs=1e-12)
        assert psnr(1.0, 255) == pytest.approx(48.1308, abs=5e-5)
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 0.5
        mse = mse_loss(x, x + 0.5).item()
        assert mse == pytest.approx(0.25, abs=1e-15)
        assert psnr(mse, 1.0) == pytest.approx(6.0206, abs=5e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(-1.0)
        with pytest.raises(ValueError):
            psnr(1.0, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-6, 1e4), st.floats(1e-6, 1e4))
    def test_strictly_decreasing(self, a, b):
        if a < b * (1 - 1e-9):
            assert psnr(a) > psnr(b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_reconstruction_losses_nonnegative_zero_iff_equal(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(1, 3, 4, 4, generator=g)
    b = a.clone()
    assert l1_loss(a, b).item() == 0 and mse_loss(a, b).item() == 0
    b[0, 1, 2, 3] += 0.01
    assert l1_loss(a, b).item() > 0 and mse_loss(a, b).item() > 0


class TestPerceptual:
    def test_missing_weights(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            FeatureExtractor(FeatureExtractorSpec(str(tmp_path / "missing.pth")))

    def test_unknown_layer(self, vgg_weights):
        with pytest.raises(ConfigError):
            FeatureExtractorSpec(str(vgg_weights), tap_layer="relu5_4")

    def test_default_tap_is_conv5_4_preactivation(self, vgg_weights):
        ex = FeatureExtractor(FeatureExtractorSpec(str(vgg_weights)))
        assert isinstance(ex.trunk[-1], torch.nn.Conv2d)
        assert ex.trunk[-1].out_channels == 512 and len(ex.trunk) == 35
        feats = ex(torch.rand(1, 3, 32, 32))
        assert (feats < 0).any()  # no ReLU after the tap

    def test_zero_symmetric_positive(self, extractor):
        g = torch.Generator().manual_seed(0)
        a = torch.rand(2, 3, 24, 24, generator=g)
        b = torch.rand(2, 3, 24, 24, generator=g)
        assert perceptual_loss(a, a, extractor).item() == 0
        assert perceptual_loss(a, b, extractor).item() == perceptual_loss(b, a, extractor).item()
        for _ in range(5):
            c = torch.rand(1, 3, 24, 24, generator=g)
            d = torch.rand(1, 3, 24, 24, generator=g)
            assert perceptual_loss(c, d, extractor).item() > 0

    def test_extractor_frozen(self, extractor):
        assert all(not p.requires_grad for p in extractor.parameters())
        extractor.train()
        assert not extractor.training


class TestHybrid:
    def test_default_weights_composition(self):
        total, br = combine_losses(0.2, 1.3863, 50.0, HybridLossWeights())
        assert total == pytest.approx(0.218863, abs=1e-12)
        assert br["adv"] == pytest.approx(0.013863, abs=1e-15)

    def test_zero_weights_reduce_to_l1(self):
        pred, target = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
        total, _ = hybrid_loss(pred, target, None, None, HybridLossWeights(1.0, 0.0, 0.0), None)
        assert total.item() == l1_loss(pred, target).item()

    def test_breakdown_sums(self, extractor):
        rng = np.random.default_rng(0)
        for _ in range(5):
            pred = torch.rand(2, 3, 16, 16, dtype=torch.float64)
            target = torch.rand(2, 3, 16, 16, dtype=torch.float64)
            c_real, c_fake = torch.tensor(rng.normal(size=2)), torch.tensor(rng.normal(size=2))
            total, br = hybrid_loss(pred.float(), target.float(), c_real, c_fake, HybridLossWeights(), extractor)
            assert abs(total.item() - (br["l1"] + br["adv"] + br["perc"]).item()) < 1e-12

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            HybridLossWeights(w_adv=-0.1)

    def test_perc_without_extractor(self):
        x = torch.rand(1, 3, 8, 8)
        with pytest.raises(ConfigError):
            hybrid_loss(x, x, torch.zeros(1), torch.zeros(1), HybridLossWeights(), None)


def _fd_check(fn, x, n=20, eps=1e-6, seed=0):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    rng = np.random.default_rng(seed)
    flat = x.detach().view(-1)
    worst = 0.0
    for i in rng.choice(flat.numel(), size=min(n, flat.numel()), replace=False):
        with torch.no_grad():
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn(x).item()
            flat[i] = orig - eps
            down = fn(x).item()
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = x.grad.view(-1)[i].item()
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst


def test_gradients_match_finite_differences(extractor):
    g = torch.Generator().manual_seed(4)
    target = torch.rand(1, 3, 16, 16, dtype=torch.float64, generator=g)
    pred = torch.rand(1, 3, 16, 16, dtype=torch.float64, generator=g)
    ex = extractor.double()
    c_real, c_fake = torch.tensor([0.4, -0.3], dtype=torch.float64), torch.tensor([0.1, 0.2], dtype=torch.float64)
    try:
        assert _fd_check(lambda p: l1_loss(p, target), pred) < 1e-3
        assert _fd_check(lambda p: mse_loss(p, target), pred) < 1e-3
        assert _fd_check(lambda p: perceptual_loss(p, target, ex), pred) < 1e-3
        assert _fd_check(
            lambda p: hybrid_loss(p, target, c_real, c_fake + p.mean(), HybridLossWeights(), ex)[0], pred
        ) < 1e-3
    finally:
        extractor.float()
