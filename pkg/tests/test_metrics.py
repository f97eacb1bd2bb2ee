import math
from collections import Counter

import numpy as np
import pytest

from helpers import natural_fixtures
from taskfusion.errors import DimensionError
from taskfusion.metrics import (
    METRIC_NAMES,
    MetricConfig,
    MetricReport,
    QabfConstants,
    en,
    evaluate_pair,
    fmi,
    mi,
    mutual_information,
    qabf,
    scd,
    to_uint8,
    vif,
)


def shannon(img: np.ndarray) -> float:
    counts = Counter(img.ravel().tolist())
    n = img.size
    return -sum(c / n * math.log2(c / n) for c in counts.values())


def test_entropy_of_constant_is_zero():
    assert en(np.full((16, 16), 77, dtype=np.uint8)) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_entropy_formula(seed):
    img = np.random.default_rng(seed).integers(0, 256 if seed % 2 else 9, (24, 40)).astype(np.uint8)
    assert en(img) == pytest.approx(shannon(img), abs=1e-12)
    assert 0.0 <= en(img) <= 8.0


@pytest.mark.parametrize("index", range(3))
def test_mi_of_identical_triple_is_twice_entropy(index):
    x = natural_fixtures()[index]
    assert mi(x, x, x) == pytest.approx(2 * shannon(x), abs=1e-9)


def test_mi_is_symmetric_and_nonnegative():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (32, 32))
    y = np.clip(x + rng.integers(-20, 20, x.shape), 0, 255)
    assert mutual_information(x, y) == pytest.approx(mutual_information(y, x), abs=1e-12)
    assert mi(x, y, x) >= 0.0


def test_mi_of_independent_noise_vanishes():
    rng = np.random.default_rng(1)
    # 16 levels keep the plug-in estimator's bias well under the tolerance
    x = rng.integers(0, 16, (256, 256)) * 17
    y = rng.integers(0, 16, (256, 256)) * 17
    assert mutual_information(x, y) < 0.05
    small = mutual_information(x[:32, :32], y[:32, :32])
    assert small > mutual_information(x, y)


def test_scd_of_sum_of_sources_is_two():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 128, (64, 64))
    b = rng.integers(0, 128, (64, 64))
    assert scd(a + b, a, b) == pytest.approx(2.0, abs=0.05)


def test_scd_zero_variance_contributes_nothing():
    c = np.full((16, 16), 90)
    rng = np.random.default_rng(3)
    a = rng.integers(0, 256, (16, 16))
    assert scd(c, c, c) == 0.0
    assert abs(scd(a, a, c)) <= 1.0


@pytest.mark.parametrize("index", range(3))
def test_qabf_of_perfect_transfer(index):
    x = natural_fixtures()[index]
    assert qabf(x, x, x) >= 0.98


def test_qabf_is_bounded_on_random_fixtures():
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        f, a, b = rng.integers(0, 256, (3, 6, 6))
        v = qabf(f, a, b)
        assert 0.0 <= v <= 1.0


def test_qabf_without_edges_is_zero_and_raw_gains_stay_bounded():
    flat = np.full((16, 16), 40)
    assert qabf(flat, flat, flat) == 0.0
    raw = MetricConfig(qabf=QabfConstants(normalize=False))
    x = natural_fixtures()[0]
    assert 0.9 < qabf(x, x, x, raw) <= 1.0


@pytest.mark.parametrize("index", range(3))
def test_vif_of_identical_triple_is_one(index):
    x = natural_fixtures()[index]
    assert vif(x, x, x) == pytest.approx(1.0, abs=1e-9)


def test_vif_needs_32_pixels():
    x = np.zeros((16, 64))
    with pytest.raises(DimensionError):
        vif(x, x, x)


def test_fmi_identity_and_variants():
    x = natural_fixtures()[1]
    assert fmi(x, x, x) == pytest.approx(1.0)
    assert fmi(x, x, x, MetricConfig(fmi_feature="pixel")) == pytest.approx(1.0)
    rng = np.random.default_rng(5)
    noise = rng.integers(0, 256, x.shape)
    assert 0.0 <= fmi(noise, x, x) < fmi(x, x, x)


@pytest.mark.parametrize("index", range(3))
def test_metrics_stable_under_border_crop(index):
    a = natural_fixtures()[index].astype(np.float64)
    b = natural_fixtures()[(index + 1) % 3].astype(np.float64)
    f = np.round((a + b) / 2)
    full = evaluate_pair(f, a, b)
    c = 4
    crop = evaluate_pair(f[c:-c, c:-c], a[c:-c, c:-c], b[c:-c, c:-c])
    for name in METRIC_NAMES:
        assert crop[name] == pytest.approx(full[name], rel=0.02), name


def test_shape_mismatch_and_float_inputs():
    with pytest.raises(DimensionError):
        mi(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))
    with pytest.raises(DimensionError):
        en(np.zeros((2, 3, 4)))
    assert np.array_equal(to_uint8(np.array([[0.0, 0.5, 1.0]])), np.array([[0, 128, 255]], dtype=np.uint8))


def test_metric_report_aggregates():
    report = MetricReport()
    report.add("p0", dict.fromkeys(METRIC_NAMES, 1.0))
    report.add("p1", dict.fromkeys(METRIC_NAMES, 3.0))
    report.add("p2", {**dict.fromkeys(METRIC_NAMES, 5.0), "VIF": float("nan")})
    agg = report.aggregate()
    assert agg["mean"]["MI"] == 3.0 and agg["median"]["EN"] == 3.0
    assert agg["mean"]["VIF"] == 2.0
