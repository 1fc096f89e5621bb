import math

import numpy as np
import pytest

from crowdsplat.image import ImageBuffer
from crowdsplat.metrics import (
    ConvFeatureExtractor,
    FeatureExtractor,
    RefinerLossWeights,
    SelfDistillWeights,
    SsimConfig,
    feature_distance,
    gram_loss,
    optim_loss,
    psnr,
    refiner_loss,
    self_distill_loss,
    ssim,
    ssim_grad,
)


def _random_image(seed, size=24, channels=3, lo=0.05, hi=0.95):
    rng = np.random.default_rng(seed)
    return ImageBuffer(rng.uniform(lo, hi, (size, size, channels)))


class _RawPixelExtractor(FeatureExtractor):
    """Features are the image itself; lets tests compute closed forms."""

    def __init__(self, weight=1.0):
        self.layer_weights = np.array([weight])

    def features(self, image):
        data = image.data if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
        return [data]


class TestPsnr:
    def test_identical_is_infinite(self):
        a = _random_image(0)
        assert psnr(a, a) == math.inf

    def test_constant_quarter_mse(self):
        a = ImageBuffer(np.zeros((16, 16, 3)))
        b = ImageBuffer(np.full((16, 16, 3), 0.5))
        assert psnr(a, b) == pytest.approx(10 * math.log10(4.0), abs=1e-12)

    def test_halving_error_adds_six_db(self):
        base = ImageBuffer(np.zeros((16, 16, 3)))
        d1 = ImageBuffer(np.full((16, 16, 3), 0.4))
        d2 = ImageBuffer(np.full((16, 16, 3), 0.2))
        assert psnr(base, d2) - psnr(base, d1) == pytest.approx(10 * math.log10(4.0), abs=1e-9)

    def test_symmetry(self):
        a, b = _random_image(1), _random_image(2)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(_random_image(0, size=8), _random_image(0, size=9))


class TestSsim:
    def test_identical_is_exactly_one(self):
        a = _random_image(3)
        assert ssim(a, a) == 1.0

    def test_constant_images_closed_form(self):
        a = ImageBuffer(np.full((16, 16, 1), 0.2))
        b = ImageBuffer(np.full((16, 16, 1), 0.4))
        c1 = 1e-4
        expected = (2 * 0.2 * 0.4 + c1) / (0.2**2 + 0.4**2 + c1)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-6)

    def test_symmetry_to_machine_precision(self):
        for seed in range(5):
            a, b = _random_image(seed), _random_image(seed + 100)
            assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12

    def test_rejects_images_smaller_than_window(self):
        tiny = ImageBuffer(np.zeros((8, 8, 1)))
        with pytest.raises(ValueError, match="window"):
            ssim(tiny, tiny)

    def test_noise_monotonicity_in_expectation(self):
        rng = np.random.default_rng(17)
        base = np.clip(
            0.5 + 0.2 * np.sin(np.linspace(0, 8, 32))[:, None] * np.cos(np.linspace(0, 6, 32))[None, :],
            0,
            1,
        )[:, :, None]
        means = []
        for amplitude in (0.02, 0.05, 0.10):
            scores = []
            for _ in range(50):
                noisy = np.clip(base + rng.normal(0, amplitude, base.shape), 0, 1)
                scores.append(ssim(ImageBuffer(base), ImageBuffer(noisy)))
            means.append(np.mean(scores))
        assert means[0] > means[1] > means[2]


class TestSsimGrad:
    def test_identical_inputs_give_exact_zero(self):
        a = _random_image(4)
        np.testing.assert_array_equal(ssim_grad(a, a), 0.0)

    def test_matches_finite_differences(self):
        a, b = _random_image(5, size=16), _random_image(6, size=16)
        grad = ssim_grad(a, b)
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(20):
            i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
            up = a.data.copy()
            up[i, j, c] += h
            down = a.data.copy()
            down[i, j, c] -= h
            fd = (ssim(ImageBuffer(up), b) - ssim(ImageBuffer(down), b)) / (2 * h)
            denom = max(abs(fd), abs(grad[i, j, c]), 1e-6)
            assert abs(fd - grad[i, j, c]) / denom <= 1e-3

    def test_gradient_is_local(self):
        # images identical outside one pixel: far away the gradient vanishes
        a = _random_image(7, size=32)
        b_data = a.data.copy()
        b_data[16, 16, 0] = min(b_data[16, 16, 0] + 0.3, 1.0)
        grad = ssim_grad(a, ImageBuffer(b_data))
        assert np.abs(grad[:4, :4]).max() <= 1e-12
        assert np.abs(grad[28:, 28:]).max() <= 1e-12
        assert np.abs(grad[12:21, 12:21]).max() > 0


class TestFeatureDistance:
    def test_identical_is_zero(self):
        fx = ConvFeatureExtractor(seed=0)
        a = _random_image(8)
        assert feature_distance(a, a, fx) == 0.0

    def test_symmetry(self):
        fx = ConvFeatureExtractor(seed=0)
        a, b = _random_image(9), _random_image(10)
        assert feature_distance(a, b, fx) == feature_distance(b, a, fx)

    def test_zero_weights_zero_distance(self):
        fx = ConvFeatureExtractor(seed=0, layer_weights=np.zeros(3))
        a, b = _random_image(11), _random_image(12)
        assert feature_distance(a, b, fx) == 0.0

    def test_extractor_is_seed_deterministic(self):
        a, b = _random_image(13), _random_image(14)
        d1 = feature_distance(a, b, ConvFeatureExtractor(seed=7))
        d2 = feature_distance(a, b, ConvFeatureExtractor(seed=7))
        d3 = feature_distance(a, b, ConvFeatureExtractor(seed=8))
        assert d1 == d2
        assert d1 != d3

    def test_positive_on_different_images(self):
        fx = ConvFeatureExtractor(seed=0)
        assert feature_distance(_random_image(15), _random_image(16), fx) > 0


class TestGramLoss:
    def test_identical_is_zero(self):
        fx = ConvFeatureExtractor(seed=0)
        a = _random_image(17)
        assert gram_loss(a, a, fx) == 0.0

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(18)
        a = rng.uniform(0.1, 0.9, (12, 12, 3))
        flat = a.reshape(-1, 3)
        shuffled = flat[rng.permutation(len(flat))].reshape(12, 12, 3)
        fx = _RawPixelExtractor()
        assert gram_loss(ImageBuffer(a), ImageBuffer(shuffled), fx) == pytest.approx(0.0, abs=1e-12)

    def test_constant_scalar_closed_form(self):
        w = 0.7
        ca, cb = 0.6, 0.3
        fx = _RawPixelExtractor(weight=w)
        a = ImageBuffer(np.full((10, 10, 1), ca))
        b = ImageBuffer(np.full((10, 10, 1), cb))
        assert gram_loss(a, b, fx) == pytest.approx(w * (ca**2 - cb**2) ** 2, abs=1e-12)


class TestSelfDistillLoss:
    def test_identical_views_zero(self):
        views = [_random_image(s) for s in range(3)]
        assert self_distill_loss(views, views) == 0.0

    def test_l2_norm_term_matches_hand_computation(self):
        a = ImageBuffer(np.zeros((16, 16, 3)))
        delta = np.zeros((16, 16, 3))
        delta[2, 3, 0] = 0.3
        delta[9, 9, 1] = 0.4
        b = ImageBuffer(delta)
        weights = SelfDistillWeights(rgb=1.0, ssim=0.0)
        assert self_distill_loss([a], [b], weights) == pytest.approx(0.5, abs=1e-12)

    def test_sum_over_views(self):
        a, b = _random_image(20), _random_image(21)
        single = self_distill_loss([a], [b])
        triple = self_distill_loss([a] * 3, [b] * 3)
        assert triple == pytest.approx(3 * single, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            self_distill_loss([_random_image(0)], [])


class TestRefinerLoss:
    def test_identical_zero_breakdown(self):
        fx = ConvFeatureExtractor(seed=0)
        a = _random_image(22)
        report = refiner_loss(a, a, RefinerLossWeights(), fx)
        assert report.total == 0.0
        assert report.l2 == report.feature == report.ssim_term == report.gram == 0.0

    def test_all_zero_weights(self):
        fx = ConvFeatureExtractor(seed=0)
        report = refiner_loss(
            _random_image(23), _random_image(24), RefinerLossWeights(0, 0, 0, 0), fx
        )
        assert report.total == 0.0

    def test_gram_only_ignores_texture_shuffle(self):
        rng = np.random.default_rng(25)
        a = rng.uniform(0.1, 0.9, (12, 12, 3))
        shuffled = a.reshape(-1, 3)[rng.permutation(144)].reshape(12, 12, 3)
        report = refiner_loss(
            ImageBuffer(a),
            ImageBuffer(shuffled),
            RefinerLossWeights(l2=0, feature=0, ssim=0, gram=1.0),
            _RawPixelExtractor(),
        )
        assert report.total == pytest.approx(0.0, abs=1e-12)

    def test_weighted_total(self):
        fx = ConvFeatureExtractor(seed=0)
        a, b = _random_image(26), _random_image(27)
        w = RefinerLossWeights(l2=2.0, feature=0.5, ssim=1.5, gram=0.25)
        report = refiner_loss(a, b, w, fx)
        assert report.total == pytest.approx(
            2.0 * report.l2 + 0.5 * report.feature + 1.5 * report.ssim_term + 0.25 * report.gram,
            rel=1e-12,
        )


class TestOptimLoss:
    def test_identical_zero_loss_zero_grad(self):
        a = _random_image(28)
        loss, grad = optim_loss(a, a)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_l1_only_hand_computed(self):
        refined = ImageBuffer(np.zeros((16, 16, 3)))
        arr = np.zeros((16, 16, 3))
        arr[0, 0, 0] = 0.5
        arr[5, 5, 2] = 0.25
        rendered = ImageBuffer(arr)
        loss, grad = optim_loss(refined, rendered, lambda_ssim=0.0)
        count = 16 * 16 * 3
        assert loss == pytest.approx(0.75 / count, abs=1e-15)
        assert grad[0, 0, 0] == pytest.approx(1.0 / count)
        assert grad[5, 5, 2] == pytest.approx(1.0 / count)
        assert grad[1, 1, 1] == 0.0

    def test_gradient_matches_finite_differences(self):
        refined, rendered = _random_image(29, size=16), _random_image(30, size=16)
        loss, grad = optim_loss(refined, rendered, lambda_ssim=0.2)
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(15):
            i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
            up = rendered.data.copy()
            up[i, j, c] += h
            down = rendered.data.copy()
            down[i, j, c] -= h
            fd = (
                optim_loss(refined, ImageBuffer(up), 0.2)[0]
                - optim_loss(refined, ImageBuffer(down), 0.2)[0]
            ) / (2 * h)
            denom = max(abs(fd), abs(grad[i, j, c]), 1e-6)
            assert abs(fd - grad[i, j, c]) / denom <= 1e-3

    def test_all_metrics_finite_on_random_pairs(self):
        fx = ConvFeatureExtractor(seed=1)
        for seed in range(5):
            a, b = _random_image(seed + 50), _random_image(seed + 60)
            assert math.isfinite(ssim(a, b))
            assert math.isfinite(feature_distance(a, b, fx))
            assert math.isfinite(gram_loss(a, b, fx))
            assert math.isfinite(optim_loss(a, b)[0])
            assert math.isfinite(psnr(a, b))


class TestSsimConfig:
    def test_kernel_normalized(self):
        k = SsimConfig().kernel()
        assert k.shape == (11, 11)
        assert k.sum() == pytest.approx(1.0, abs=1e-12)

    def test_stabilizers(self):
        cfg = SsimConfig()
        assert cfg.c1 == pytest.approx(1e-4)
        assert cfg.c2 == pytest.approx(9e-4)
