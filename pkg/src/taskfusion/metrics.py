"""Reference-based fusion quality metrics on 8-bit grayscale images.

Argument order is always ``(fused, src_a, src_b)``. Integer arrays are taken
as gray levels; floating arrays are taken as unit range and quantized with
``round(255 * x)``. Logarithms are base 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import ndimage
from scipy.signal import convolve2d

from .errors import DimensionError

BINS = 256
METRIC_NAMES = ("MI", "FMI", "VIF", "Qabf", "EN", "SCD")


@dataclass(frozen=True)
class QabfConstants:
    """Sigmoid shapes for edge-strength (g) and orientation (a) preservation.

    With ``normalize=True`` the gains are chosen so a perfectly preserved
    edge scores exactly 1; ``normalize=False`` uses the fixed gains below.
    """

    kappa_g: float = -15.0
    sigma_g: float = 0.5
    kappa_a: float = -22.0
    sigma_a: float = 0.8
    gamma_g: float = 0.9994
    gamma_a: float = 0.9879
    normalize: bool = True
    exponent: float = 1.0

    @property
    def gains(self):
        if self.normalize:
            return (
                1.0 + np.exp(self.kappa_g * (1.0 - self.sigma_g)),
                1.0 + np.exp(self.kappa_a * (1.0 - self.sigma_a)),
            )
        return self.gamma_g, self.gamma_a


@dataclass(frozen=True)
class MetricConfig:
    qabf: QabfConstants = field(default_factory=QabfConstants)
    vif_scales: int = 4
    vif_noise_var: float = 2.0
    vif_aggregate: str = "mean"  # or "sum"
    fmi_feature: str = "gradient"  # or "pixel"
    fmi_aggregate: str = "mean"  # or "sum"
    mi_aggregate: str = "sum"  # or "mean"


DEFAULT_CONFIG = MetricConfig()


def to_uint8(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D grayscale image, got shape {a.shape}")
    if np.issubdtype(a.dtype, np.integer):
        return np.clip(a, 0, 255).astype(np.uint8)
    return np.clip(np.round(a.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def _check(*imgs):
    out = [to_uint8(i) for i in imgs]
    for o in out[1:]:
        if o.shape != out[0].shape:
            raise DimensionError(f"shape mismatch: {out[0].shape} vs {o.shape}")
    return out


def _entropy_of_counts(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0  # avoid -0.0


def entropy(img) -> float:
    """Shannon entropy (bits) of the 256-bin gray-level histogram."""
    (x,) = _check(img)
    return _entropy_of_counts(np.bincount(x.ravel(), minlength=BINS).astype(np.float64))


en = entropy


def joint_histogram(x: np.ndarray, y: np.ndarray, bins: int = BINS) -> np.ndarray:
    idx = x.astype(np.int64).ravel() * bins + y.astype(np.int64).ravel()
    return np.bincount(idx, minlength=bins * bins).reshape(bins, bins).astype(np.float64)


def mutual_information(x: np.ndarray, y: np.ndarray, bins: int = BINS) -> float:
    """I(X;Y) = H(X) + H(Y) - H(X,Y) from a joint histogram of integer maps."""
    joint = joint_histogram(x, y, bins)
    hx = _entropy_of_counts(joint.sum(axis=1))
    hy = _entropy_of_counts(joint.sum(axis=0))
    hxy = _entropy_of_counts(joint.ravel())
    return max(hx + hy - hxy, 0.0)


def mi(fused, src_a, src_b, config: MetricConfig = DEFAULT_CONFIG) -> float:
    f, a, b = _check(fused, src_a, src_b)
    total = mutual_information(f, a) + mutual_information(f, b)
    return total if config.mi_aggregate == "sum" else total / 2.0


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    den = np.sqrt((x * x).sum() * (y * y).sum())
    if den == 0:
        return 0.0  # zero variance: no correlation contribution
    return float((x * y).sum() / den)


def scd(fused, src_a, src_b) -> float:
    """Sum of correlations of differences: corr(F - B, A) + corr(F - A, B)."""
    f, a, b = (x.astype(np.float64) for x in _check(fused, src_a, src_b))
    return _pearson(f - b, a) + _pearson(f - a, b)


def _sobel(x: np.ndarray):
    x = x.astype(np.float64)
    gx = ndimage.sobel(x, axis=1, mode="nearest")
    gy = ndimage.sobel(x, axis=0, mode="nearest")
    return gx, gy


def _edge_maps(x):
    gx, gy = _sobel(x)
    strength = np.hypot(gx, gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        orientation = np.where(gx == 0, np.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return strength, orientation


def _edge_preservation(g_s, a_s, g_f, a_f, c: QabfConstants):
    hi = np.maximum(g_s, g_f)
    lo = np.minimum(g_s, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_g = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 1.0)
    rel_a = 1.0 - np.abs(a_s - a_f) / (np.pi / 2)
    gain_g, gain_a = c.gains
    q_g = gain_g / (1.0 + np.exp(c.kappa_g * (rel_g - c.sigma_g)))
    q_a = gain_a / (1.0 + np.exp(c.kappa_a * (rel_a - c.sigma_a)))
    return q_g * q_a


def qabf(fused, src_a, src_b, config: MetricConfig = DEFAULT_CONFIG) -> float:
    """Edge-information transfer score Q^AB/F in [0, 1].

    Returns 0 when neither source has any edge (nothing to transfer).
    """
    f, a, b = _check(fused, src_a, src_b)
    c = config.qabf
    g_a, o_a = _edge_maps(a)
    g_b, o_b = _edge_maps(b)
    g_f, o_f = _edge_maps(f)
    q_af = _edge_preservation(g_a, o_a, g_f, o_f, c)
    q_bf = _edge_preservation(g_b, o_b, g_f, o_f, c)
    w_a, w_b = g_a**c.exponent, g_b**c.exponent
    den = (w_a + w_b).sum()
    if den == 0:
        return 0.0
    return float(np.clip((q_af * w_a + q_bf * w_b).sum() / den, 0.0, 1.0))


def _gaussian_kernel(n: int, sigma: float) -> np.ndarray:
    r = (n - 1) / 2.0
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def vif_single(reference, distorted, scales: int = 4, noise_var: float = 2.0) -> float:
    """Pixel-domain multi-scale visual information fidelity of one pair."""
    ref = np.asarray(reference, dtype=np.float64)
    dist = np.asarray(distorted, dtype=np.float64)
    num = den = 0.0
    for scale in range(1, scales + 1):
        n = 2 ** (scales - scale + 1) + 1
        win = _gaussian_kernel(n, n / 5.0)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        s1 = np.maximum(convolve2d(ref * ref, win, mode="valid") - mu1 * mu1, 0.0)
        s2 = np.maximum(convolve2d(dist * dist, win, mode="valid") - mu2 * mu2, 0.0)
        s12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2

        eps = 1e-10
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat = s1 < eps
        g[flat] = 0
        sv[flat] = s2[flat]
        s1 = np.where(flat, 0.0, s1)
        blank = s2 < eps
        g[blank] = 0
        sv[blank] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, eps)

        num += np.log10(1.0 + g * g * s1 / (sv + noise_var)).sum()
        den += np.log10(1.0 + s1 / noise_var).sum()
    if den == 0:
        return 0.0
    return float(num / den)


def vif(fused, src_a, src_b, config: MetricConfig = DEFAULT_CONFIG) -> float:
    f, a, b = _check(fused, src_a, src_b)
    if min(f.shape) < 32:
        raise DimensionError(f"VIF needs both dimensions >= 32, got {f.shape}")
    va = vif_single(a, f, config.vif_scales, config.vif_noise_var)
    vb = vif_single(b, f, config.vif_scales, config.vif_noise_var)
    return (va + vb) / 2.0 if config.vif_aggregate == "mean" else va + vb


def _quantize_features(maps, bins: int = BINS):
    hi = max(float(m.max()) for m in maps)
    if hi <= 0:
        return [np.zeros(m.shape, dtype=np.int64) for m in maps]
    return [np.minimum((m / hi * (bins - 1)).round().astype(np.int64), bins - 1) for m in maps]


def _normalized_mi(x, y) -> float:
    joint = joint_histogram(x, y)
    hx = _entropy_of_counts(joint.sum(axis=1))
    hy = _entropy_of_counts(joint.sum(axis=0))
    if hx + hy == 0:
        return 1.0  # both maps constant: perfectly (trivially) shared
    hxy = _entropy_of_counts(joint.ravel())
    return 2.0 * max(hx + hy - hxy, 0.0) / (hx + hy)


def fmi(fused, src_a, src_b, config: MetricConfig = DEFAULT_CONFIG) -> float:
    """Feature mutual information: normalized MI between feature maps.

    Features are Sobel gradient magnitudes (``fmi_feature="gradient"``) or
    raw intensities (``"pixel"``); per-source values are 2 I / (H_F + H_S).
    """
    f, a, b = _check(fused, src_a, src_b)
    if config.fmi_feature == "gradient":
        feats = [np.hypot(*_sobel(x)) for x in (f, a, b)]
        qf, qa, qb = _quantize_features(feats)
    else:
        qf, qa, qb = f, a, b
    va, vb = _normalized_mi(qf, qa), _normalized_mi(qf, qb)
    return (va + vb) / 2.0 if config.fmi_aggregate == "mean" else va + vb


def evaluate_pair(fused, src_a, src_b, config: MetricConfig = DEFAULT_CONFIG) -> Dict[str, float]:
    """All six metrics for one fused/source triple."""
    f, a, b = _check(fused, src_a, src_b)
    return {
        "MI": mi(f, a, b, config),
        "FMI": fmi(f, a, b, config),
        "VIF": vif(f, a, b, config) if min(f.shape) >= 32 else float("nan"),
        "Qabf": qabf(f, a, b, config),
        "EN": entropy(f),
        "SCD": scd(f, a, b),
    }


@dataclass
class MetricReport:
    """Per-pair metric rows plus model accounting."""

    rows: Dict[str, Dict[str, float]] = field(default_factory=dict)
    param_count: Optional[int] = None
    latency_estimate: Optional[float] = None
    fuse_seconds: Optional[float] = None

    def add(self, pair_id: str, values: Dict[str, float]) -> None:
        self.rows[pair_id] = dict(values)

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        out = {"mean": {}, "median": {}}
        for name in METRIC_NAMES:
            vals = np.array([r[name] for r in self.rows.values() if name in r], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            out["mean"][name] = float(vals.mean()) if vals.size else float("nan")
            out["median"][name] = float(np.median(vals)) if vals.size else float("nan")
        return out
