"""Image quality metrics (PSNR, windowed SSIM, feature-space distance, Gram
loss) and the composite losses used for self-distillation, refiner scoring,
and scene optimization, with analytic image gradients where optimization
needs them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .fileio import derive_seed
from .image import ImageBuffer, require_same_shape

_NORM_EPS = 1e-10


def _plane(image: ImageBuffer | np.ndarray) -> np.ndarray:
    if isinstance(image, ImageBuffer):
        return image.data
    arr = np.asarray(image, dtype=np.float64)
    return arr[:, :, None] if arr.ndim == 2 else arr


@dataclass(frozen=True)
class SsimConfig:
    """Gaussian-window SSIM settings; the stabilizers follow the usual
    (k * dynamic_range)^2 convention."""

    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    max_value: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.max_value) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.max_value) ** 2

    def kernel(self) -> np.ndarray:
        half = (self.window - 1) / 2.0
        coords = np.arange(self.window) - half
        g = np.exp(-(coords**2) / (2.0 * self.sigma**2))
        k = np.outer(g, g)
        return k / k.sum()


DEFAULT_SSIM = SsimConfig()


def psnr(a: ImageBuffer, b: ImageBuffer, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images return math.inf."""
    pa, pb = _plane(a), _plane(b)
    if pa.shape != pb.shape:
        raise ValueError(f"psnr images differ in shape: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def _ssim_window_maps(pa: np.ndarray, pb: np.ndarray, cfg: SsimConfig):
    """Per-window moment maps for one channel pair ('valid' windows only)."""
    kernel = cfg.kernel()
    mu_a = convolve2d(pa, kernel, mode="valid")
    mu_b = convolve2d(pb, kernel, mode="valid")
    var_a = convolve2d(pa * pa, kernel, mode="valid") - mu_a**2
    var_b = convolve2d(pb * pb, kernel, mode="valid") - mu_b**2
    cov = convolve2d(pa * pb, kernel, mode="valid") - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + cfg.c1
    a2 = 2.0 * cov + cfg.c2
    b1 = mu_a**2 + mu_b**2 + cfg.c1
    b2 = var_a + var_b + cfg.c2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a: ImageBuffer, b: ImageBuffer, cfg: SsimConfig = DEFAULT_SSIM) -> float:
    """Mean SSIM over all fully-interior windows and channels."""
    pa, pb = _plane(a), _plane(b)
    if pa.shape != pb.shape:
        raise ValueError(f"ssim images differ in shape: {pa.shape} vs {pb.shape}")
    if pa.shape[0] < cfg.window or pa.shape[1] < cfg.window:
        raise ValueError(f"image smaller than the {cfg.window}x{cfg.window} SSIM window")
    total = 0.0
    for ch in range(pa.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_window_maps(pa[:, :, ch], pb[:, :, ch], cfg)
        total += float(np.mean((a1 * a2) / (b1 * b2)))
    return total / pa.shape[2]


def ssim_grad(a: ImageBuffer, b: ImageBuffer, cfg: SsimConfig = DEFAULT_SSIM) -> np.ndarray:
    """d(mean SSIM)/d(a) per pixel, shape (H, W, C)."""
    pa, pb = _plane(a), _plane(b)
    if pa.shape != pb.shape:
        raise ValueError(f"ssim images differ in shape: {pa.shape} vs {pb.shape}")
    if pa.shape[0] < cfg.window or pa.shape[1] < cfg.window:
        raise ValueError(f"image smaller than the {cfg.window}x{cfg.window} SSIM window")
    if np.array_equal(pa, pb):
        # SSIM is stationary at a == b; return the provable zero rather than
        # the cancellation residue of the general formula, so optimizers see
        # an exact fixed point.
        return np.zeros_like(pa)
    kernel = cfg.kernel()
    grad = np.zeros_like(pa)
    channels = pa.shape[2]
    for ch in range(channels):
        ca, cb = pa[:, :, ch], pb[:, :, ch]
        mu_a, mu_b, a1, a2, b1, b2 = _ssim_window_maps(ca, cb, cfg)
        windows = a1.size * channels
        denom = b1 * b2
        score = (a1 * a2) / denom
        # coefficients of b_x, a_x, and the constant per-window term
        t1 = 2.0 * a1 / denom
        t2 = -2.0 * score / b2
        t0 = 2.0 * mu_b * a2 / denom - 2.0 * mu_a * score / b1 - mu_b * t1 - mu_a * t2
        spread = (
            convolve2d(t0, kernel, mode="full")
            + ca * convolve2d(t2, kernel, mode="full")
            + cb * convolve2d(t1, kernel, mode="full")
        )
        grad[:, :, ch] = spread / windows
    return grad


class FeatureExtractor:
    """Interface: deterministic multi-layer feature maps plus layer weights."""

    layer_weights: np.ndarray

    def features(self, image: ImageBuffer | np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError


class ConvFeatureExtractor(FeatureExtractor):
    """Fixed random convolution bank: per level, 3x3 filters drawn once from a
    seeded unit-variance generator, absolute-value nonlinearity, then 2x
    average pooling. No training anywhere; the filters depend only on
    (seed, level, input channels)."""

    def __init__(self, seed: int = 0, levels: int = 3, num_filters: int = 16, layer_weights=None):
        if levels < 1:
            raise ValueError("need at least one level")
        self.seed = int(seed)
        self.levels = int(levels)
        self.num_filters = int(num_filters)
        if layer_weights is None:
            layer_weights = np.ones(levels)
        self.layer_weights = np.asarray(layer_weights, dtype=np.float64)
        if self.layer_weights.shape != (levels,):
            raise ValueError(f"layer_weights must have {levels} entries")
        if np.any(self.layer_weights < 0):
            raise ValueError("layer weights must be nonnegative")
        self._filters: dict[tuple[int, int], np.ndarray] = {}

    def _filter_bank(self, level: int, c_in: int) -> np.ndarray:
        key = (level, c_in)
        if key not in self._filters:
            rng = np.random.Generator(
                np.random.Philox(derive_seed("conv-features", self.seed, level, c_in))
            )
            bank = rng.standard_normal((3, 3, c_in, self.num_filters))
            self._filters[key] = bank / np.sqrt(9.0 * c_in)
        return self._filters[key]

    def features(self, image: ImageBuffer | np.ndarray) -> list[np.ndarray]:
        x = _plane(image)
        maps = []
        for level in range(self.levels):
            if x.shape[0] < 3 or x.shape[1] < 3:
                raise ValueError("image too small for the feature pyramid")
            bank = self._filter_bank(level, x.shape[2])
            windows = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(0, 1))
            # windows: (H-2, W-2, C, 3, 3) -> contract with (3, 3, C, F)
            x = np.abs(np.einsum("hwcij,ijcf->hwf", windows, bank))
            maps.append(x)
            h2, w2 = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
            pooled = x[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2, x.shape[2]).mean(axis=(1, 3))
            x = pooled
        return maps


def feature_distance(a: ImageBuffer, b: ImageBuffer, extractor: FeatureExtractor) -> float:
    """Weighted sum over layers of spatially averaged squared differences of
    per-position channel-normalized features."""
    pa, pb = _plane(a), _plane(b)
    if pa.shape != pb.shape:
        raise ValueError(f"feature_distance images differ in shape: {pa.shape} vs {pb.shape}")
    fa = extractor.features(pa)
    fb = extractor.features(pb)
    if len(fa) != len(extractor.layer_weights):
        raise ValueError("extractor returned an unexpected number of layers")
    total = 0.0
    for w, la, lb in zip(extractor.layer_weights, fa, fb):
        na = la / np.sqrt((la**2).sum(axis=2, keepdims=True) + _NORM_EPS)
        nb = lb / np.sqrt((lb**2).sum(axis=2, keepdims=True) + _NORM_EPS)
        total += float(w) * float(((na - nb) ** 2).sum(axis=2).mean())
    return total


def _gram(feature_map: np.ndarray) -> np.ndarray:
    h, w, _ = feature_map.shape
    return np.einsum("hwc,hwd->cd", feature_map, feature_map) / (h * w)


def gram_loss(a: ImageBuffer, b: ImageBuffer, extractor: FeatureExtractor) -> float:
    """Weighted squared Frobenius distance between per-layer Gram matrices of
    the raw (un-normalized) features; invariant to spatial shuffling."""
    pa, pb = _plane(a), _plane(b)
    if pa.shape != pb.shape:
        raise ValueError(f"gram_loss images differ in shape: {pa.shape} vs {pb.shape}")
    fa = extractor.features(pa)
    fb = extractor.features(pb)
    total = 0.0
    for w, la, lb in zip(extractor.layer_weights, fa, fb):
        diff = _gram(la) - _gram(lb)
        total += float(w) * float((diff**2).sum())
    return total


@dataclass(frozen=True)
class SelfDistillWeights:
    rgb: float = 1.0
    ssim: float = 0.2

    def __post_init__(self):
        if self.rgb < 0 or self.ssim < 0:
            raise ValueError("loss weights must be nonnegative")


def self_distill_loss(
    clean: list[ImageBuffer],
    coarse: list[ImageBuffer],
    weights: SelfDistillWeights = SelfDistillWeights(),
    ssim_cfg: SsimConfig = DEFAULT_SSIM,
) -> float:
    """Sum over views of lambda_rgb * ||clean - coarse||_2 (L2 norm of the
    flattened residual, not MSE) plus lambda_ssim * (1 - SSIM)."""
    if len(clean) != len(coarse):
        raise ValueError(f"view lists differ in length: {len(clean)} vs {len(coarse)}")
    total = 0.0
    for view_clean, view_coarse in zip(clean, coarse):
        require_same_shape(view_clean, view_coarse, "self-distillation views")
        residual = view_clean.data - view_coarse.data
        total += weights.rgb * float(np.sqrt((residual**2).sum()))
        if weights.ssim:
            total += weights.ssim * (1.0 - ssim(view_clean, view_coarse, ssim_cfg))
    return total


@dataclass(frozen=True)
class RefinerLossWeights:
    l2: float = 1.0
    feature: float = 1.0
    ssim: float = 0.5
    gram: float = 1.0

    def __post_init__(self):
        if min(self.l2, self.feature, self.ssim, self.gram) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class RefinerLossReport:
    total: float
    l2: float
    feature: float
    ssim_term: float  # 1 - SSIM
    gram: float

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "l2": self.l2,
            "feature": self.feature,
            "ssim_term": self.ssim_term,
            "gram": self.gram,
        }


def refiner_loss(
    out: ImageBuffer,
    gt: ImageBuffer,
    weights: RefinerLossWeights,
    extractor: FeatureExtractor,
    ssim_cfg: SsimConfig = DEFAULT_SSIM,
) -> RefinerLossReport:
    """Composite refiner score: weighted MSE + feature distance + (1 - SSIM)
    + Gram loss, with the raw per-term breakdown for diagnostics."""
    require_same_shape(out, gt, "refiner loss images")
    l2 = float(np.mean((out.data - gt.data) ** 2))
    feat = feature_distance(out, gt, extractor) if weights.feature else 0.0
    ssim_term = (1.0 - ssim(out, gt, ssim_cfg)) if weights.ssim else 0.0
    gram = gram_loss(out, gt, extractor) if weights.gram else 0.0
    total = weights.l2 * l2 + weights.feature * feat + weights.ssim * ssim_term + weights.gram * gram
    return RefinerLossReport(total=total, l2=l2, feature=feat, ssim_term=ssim_term, gram=gram)


def optim_loss(
    refined: ImageBuffer,
    rendered: ImageBuffer,
    lambda_ssim: float = 0.2,
    ssim_cfg: SsimConfig = DEFAULT_SSIM,
) -> tuple[float, np.ndarray]:
    """Distillation objective: mean |refined - rendered| plus
    lambda_ssim * (1 - SSIM), with its gradient with respect to the rendered
    image. The L1 subgradient at exact ties is 0."""
    require_same_shape(refined, rendered, "optimization targets")
    diff = rendered.data - refined.data
    count = diff.size
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / count
    if lambda_ssim:
        loss += lambda_ssim * (1.0 - ssim(refined, rendered, ssim_cfg))
        grad = grad - lambda_ssim * ssim_grad(rendered, refined, ssim_cfg)
    return loss, grad
