"""Unsupervised fusion losses.

Images are tensors shaped ``(N, 1, H, W)`` (2-D and 3-D inputs are promoted)
with values in [0, 1]. Every squared-error term uses mean reduction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError

GRAY_LEVELS = 256

_SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


@dataclass(frozen=True)
class LossWeights:
    mu: float = 1.0  # SSIM trade-off
    eta: float = 0.5  # fusion term weight in the joint objective
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2
    feature_weights: str = "gradient"  # or "external"
    richness_window: int = 3
    saliency_temperature: float = 255.0

    def __post_init__(self):
        if self.mu < 0 or self.eta < 0:
            raise ConfigError("mu and eta must be nonnegative")
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"SSIM window must be odd and >= 3, got {self.window}")
        if self.feature_weights not in ("gradient", "external"):
            raise ConfigError(f"unknown feature weight mode {self.feature_weights!r}")
        if self.saliency_temperature <= 0:
            raise ConfigError("saliency_temperature must be positive")


DEFAULT_WEIGHTS = LossWeights()


def _as4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    if x.dim() == 4:
        return x
    raise DimensionError(f"expected a 2-D, 3-D or 4-D image tensor, got shape {tuple(x.shape)}")


def _same_shape(*imgs):
    shape = imgs[0].shape
    for im in imgs[1:]:
        if im.shape != shape:
            raise DimensionError(f"shape mismatch: {tuple(shape)} vs {tuple(im.shape)}")


def intensity_loss(img1, img2):
    _same_shape(img1, img2)
    return ((img1 - img2) ** 2).mean()


def gaussian_window(size: int, sigma: float, dtype=None) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype or torch.get_default_dtype()) - size // 2
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(img1, img2, weights: LossWeights = DEFAULT_WEIGHTS):
    """Local SSIM over valid (unpadded) Gaussian windows."""
    _same_shape(img1, img2)
    x, y = _as4d(img1), _as4d(img2)
    h, w = x.shape[-2:]
    if min(h, w) < weights.window:
        raise DimensionError(f"image {h}x{w} is smaller than the SSIM window {weights.window}")
    c = x.shape[1]
    win = gaussian_window(weights.window, weights.sigma, x.dtype).expand(c, 1, -1, -1)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(y * y) - mu_yy
    cov = filt(x * y) - mu_xy
    num = (2 * mu_xy + weights.c1) * (2 * cov + weights.c2)
    den = (mu_xx + mu_yy + weights.c1) * (var_x + var_y + weights.c2)
    return num / den


def ssim(img1, img2, weights: LossWeights = DEFAULT_WEIGHTS):
    return ssim_map(img1, img2, weights).mean()


def ssim_loss(img1, img2, weights: LossWeights = DEFAULT_WEIGHTS):
    return 1.0 - ssim(img1, img2, weights)


def fusion_loss(img1, img2, weights: LossWeights = DEFAULT_WEIGHTS):
    """Plain intensity + mu * SSIM loss between two images."""
    return intensity_loss(img1, img2) + weights.mu * ssim_loss(img1, img2, weights)


def quantize(img) -> torch.Tensor:
    """[0, 1] image -> integer gray levels 0..255."""
    return torch.round(img.detach().clamp(0.0, 1.0) * (GRAY_LEVELS - 1)).long()


def contrast_table(levels: torch.Tensor, dtype=None) -> torch.Tensor:
    """Histogram contrast per gray level: M(v) = sum_j H(j) |j - v|."""
    dtype = dtype or torch.get_default_dtype()
    # integer sums in float64, one rounding at the division
    counts = torch.bincount(levels.reshape(-1), minlength=GRAY_LEVELS).to(torch.float64)
    g = torch.arange(GRAY_LEVELS, dtype=torch.float64)
    dist = (g[:, None] - g[None, :]).abs()
    return ((dist @ counts) / counts.sum()).to(dtype)


def histogram_saliency(img) -> torch.Tensor:
    """Per-pixel histogram contrast in gray-level units (no gradient).

    Each image in a batch gets its own 256-bin histogram.
    """
    x = _as4d(img)
    levels = quantize(x)
    out = torch.empty(x.shape, dtype=x.dtype)
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            table = contrast_table(levels[n, c], x.dtype)
            out[n, c] = table[levels[n, c]]
    return out.reshape(img.shape)


def saliency_from_contrast(contrast_a, contrast_b, temperature: float = 255.0):
    _same_shape(contrast_a, contrast_b)
    logits = torch.stack([contrast_a, contrast_b]) / temperature
    w = torch.softmax(logits, dim=0)
    return w[0], w[1]


def saliency_weights(img_a, img_b, weights: LossWeights = DEFAULT_WEIGHTS):
    """Pixel-wise complementary maps (M_A, M_B) from histogram contrast.

    Contrast maps are divided by ``saliency_temperature`` (255 puts them on
    unit range) before the two-way softmax.
    """
    _same_shape(img_a, img_b)
    return saliency_from_contrast(
        histogram_saliency(img_a), histogram_saliency(img_b), weights.saliency_temperature
    )


def weighted_task_loss(fused, img_a, img_b, maps, weights: LossWeights = DEFAULT_WEIGHTS):
    """Saliency-weighted intensity + mu * saliency-weighted SSIM."""
    _same_shape(fused, img_a, img_b)
    m_a, m_b = maps
    _same_shape(fused, m_a, m_b)
    l_int = ((m_a * (fused - img_a)) ** 2).mean() + ((m_b * (fused - img_b)) ** 2).mean()
    if weights.mu == 0:
        return l_int
    l_ssim = (1.0 - ssim(m_a * fused, m_a * img_a, weights)) + (
        1.0 - ssim(m_b * fused, m_b * img_b, weights)
    )
    return l_int + weights.mu * l_ssim


def sobel(img):
    """Sobel responses (gx, gy) with replicate padding."""
    x = _as4d(img)
    kx = torch.tensor(_SOBEL_X, dtype=x.dtype)
    k = torch.stack([kx, kx.t()])[:, None]
    c = x.shape[1]
    k = k.repeat(c, 1, 1, 1)
    g = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k, groups=c)
    return g[:, 0::2], g[:, 1::2]


def gradient_energy(img, window: int = 3):
    """Window-averaged squared Sobel magnitude."""
    gx, gy = sobel(img)
    e = gx * gx + gy * gy
    if window > 1:
        p = window // 2
        e = F.avg_pool2d(F.pad(e, (p, p, p, p), mode="replicate"), window, stride=1)
    return e


def richness_weights(img_a, img_b, weights: LossWeights = DEFAULT_WEIGHTS, extractor=None):
    """Per-pixel source weights from feature richness, softmax across sources."""
    _same_shape(img_a, img_b)
    if weights.feature_weights == "external":
        if extractor is None:
            raise ConfigError("feature_weights='external' needs an extractor callable")
        e_a, e_b = extractor(_as4d(img_a)), extractor(_as4d(img_b))
    else:
        e_a = gradient_energy(img_a, weights.richness_window)
        e_b = gradient_energy(img_b, weights.richness_window)
    w = torch.softmax(torch.stack([e_a, e_b]), dim=0)
    return w[0], w[1]


def feature_richness_loss(
    fused,
    img_a,
    img_b,
    weights: LossWeights = DEFAULT_WEIGHTS,
    extractor: Optional[Callable] = None,
):
    """Reconstruction loss weighted toward the richer source at each pixel."""
    _same_shape(fused, img_a, img_b)
    w_a, w_b = richness_weights(img_a, img_b, weights, extractor)
    f = _as4d(fused)
    return (w_a * (f - _as4d(img_a)) ** 2).mean() + (w_b * (f - _as4d(img_b)) ** 2).mean()


def task_loss(task: str, output, img_a, img_b, mask=None, weights: LossWeights = DEFAULT_WEIGHTS, maps=None):
    """Loss of the surrogate downstream task on the task head's output."""
    if task == "enhancement":
        if maps is None:
            maps = saliency_weights(img_a, img_b, weights)
        return weighted_task_loss(output, img_a, img_b, maps, weights)
    if task == "mask":
        if mask is None:
            raise ConfigError("mask task needs ground-truth masks")
        return F.binary_cross_entropy_with_logits(output, mask)
    raise ConfigError(f"unknown surrogate task {task!r}")


def joint_objective(task_value, fused, img_a, img_b, weights: LossWeights = DEFAULT_WEIGHTS, extractor=None):
    """Task loss plus eta times the fusion loss of the same fused image."""
    if weights.eta == 0:
        return task_value
    return task_value + weights.eta * feature_richness_loss(fused, img_a, img_b, weights, extractor)
