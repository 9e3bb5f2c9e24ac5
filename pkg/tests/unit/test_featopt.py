"""Unit tests for per-image feature optimization and deviation traces"""
import math

import pytest
import torch

from src.core.params import FreezeViolationError
from src.diffusion.oracle import OraclePredictor
from src.diffusion.sampler import sample_noise
from src.featopt.deviation import DeviationTrace, MissingProxyError, measure_deviation
from src.featopt.optimize import (
    FeatOptCurve,
    ProxyFeatures,
    frozen,
    optimize_features,
    proxy_gt_feature,
)


def snapshot(pipeline):
    return {name: p.detach().clone() for name, p in pipeline.named_parameters()}


def test_zero_steps_gives_baseline_only(tiny_pipeline, tiny_item):
    """steps=0 records just the baseline RMSE"""
    curve = optimize_features(tiny_pipeline, tiny_item, level=4, steps=0, lr=1e-2)
    assert len(curve.rmse) == 1
    assert curve.index == 0
    assert curve.reduction == 0.0


def test_zero_lr_gives_constant_curve(tiny_pipeline, tiny_item):
    """lr=0 never moves the feature"""
    curve = optimize_features(tiny_pipeline, tiny_item, level=2, steps=3, lr=0.0)
    assert len(curve.rmse) == 4
    assert all(value == curve.rmse[0] for value in curve.rmse)


@pytest.mark.parametrize("level", [1, 2, 3, 4])
def test_curve_shape_and_best_so_far(tiny_pipeline, tiny_item, level):
    """steps + 1 entries and a non-increasing best-so-far curve"""
    curve = optimize_features(tiny_pipeline, tiny_item, level=level, steps=4, lr=5e-2)
    best = curve.best
    assert len(curve.rmse) == 5 and len(best) == 5
    assert best[0] == curve.rmse[0]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert all(math.isfinite(v) for v in curve.rmse)


def test_optimization_leaves_network_untouched(tiny_pipeline, tiny_item):
    """Only the feature moves; parameters and their trainable flags are restored"""
    before = snapshot(tiny_pipeline)
    flags = {name: p.requires_grad for name, p in tiny_pipeline.named_parameters()}
    optimize_features(tiny_pipeline, tiny_item, level=3, steps=3, lr=1e-1)
    after = snapshot(tiny_pipeline)
    assert all(torch.equal(before[name], after[name]) for name in before)
    assert flags == {name: p.requires_grad for name, p in tiny_pipeline.named_parameters()}


def test_frozen_detects_changes(tiny_pipeline):
    """Changing a parameter inside the frozen context raises"""
    with pytest.raises(FreezeViolationError):
        with frozen(tiny_pipeline):
            with torch.no_grad():
                tiny_pipeline.tail.reduce.bias.add_(1.0)


def test_invalid_level(tiny_pipeline, tiny_item):
    """Levels outside 1..4 are rejected"""
    with pytest.raises(ValueError):
        optimize_features(tiny_pipeline, tiny_item, level=5, steps=1, lr=1e-2)


def test_best_curve_definition():
    """best is the running minimum and reduction uses it"""
    curve = FeatOptCurve(level=4, lr=0.01, steps=3, rmse=[3.0, 2.0, 2.5, 1.5])
    assert curve.best == [3.0, 2.0, 2.0, 1.5]
    assert curve.reduction == pytest.approx(1.5)


def test_proxy_is_best_so_far_and_deterministic(tiny_pipeline, tiny_item):
    """Proxy RMSE is the minimum reached and repeat runs agree"""
    a = proxy_gt_feature(tiny_pipeline, tiny_item, steps=4, lr=5e-2)
    b = proxy_gt_feature(tiny_pipeline, tiny_item, steps=4, lr=5e-2)
    assert a.rmse <= a.baseline_rmse
    assert a.rmse == pytest.approx(a.curve[-1])
    assert all(y <= x for x, y in zip(a.curve, a.curve[1:]))
    assert torch.equal(a.features[3], b.features[3])
    assert torch.equal(a.features[4], b.features[4])
    level4 = optimize_features(tiny_pipeline, tiny_item, level=4, steps=0, lr=5e-2)
    assert a.baseline_rmse == level4.rmse[0]


def test_oracle_deviation_strictly_decreases(tiny_pipeline, tiny_item):
    """An oracle that knows the proxy walks straight toward it"""
    image = tiny_item["image"].unsqueeze(0)
    with torch.no_grad():
        high = tiny_pipeline.encode(image).high()
    proxy = ProxyFeatures(
        features={level: 0.5 * value for level, value in high.items()},
        baseline_rmse=1.0,
        rmse=0.5,
    )
    degradation = {level: high[level] - proxy.features[level] for level in high}
    oracle = OraclePredictor(degradation, sample_noise(high, 3))
    trace = measure_deviation(tiny_pipeline, tiny_item, proxy, steps=3, seed=3, predictor=oracle)
    assert trace.steps == [3, 2, 1, 0]
    assert len(trace.distances) == 4
    assert all(b < a for a, b in zip(trace.distances, trace.distances[1:]))
    assert trace.distances[-1] < 1e-4
    assert trace.decreasing_fraction() == 1.0
    assert trace.variant == "inv" and trace.index == 0


def test_zero_step_deviation(tiny_pipeline, tiny_item):
    """steps=0 yields one distance"""
    image = tiny_item["image"].unsqueeze(0)
    with torch.no_grad():
        high = tiny_pipeline.encode(image).high()
    proxy = ProxyFeatures(
        features={level: torch.zeros_like(value) for level, value in high.items()},
        baseline_rmse=0.0,
        rmse=0.0,
    )
    trace = measure_deviation(tiny_pipeline, tiny_item, proxy, steps=0)
    assert len(trace.distances) == 1
    assert math.isnan(trace.decreasing_fraction())


def test_missing_proxy(tiny_pipeline, tiny_item):
    """Deviation without a proxy raises"""
    with pytest.raises(MissingProxyError):
        measure_deviation(tiny_pipeline, tiny_item, None, steps=1)


def test_decreasing_fraction():
    """Counts strict decreases between consecutive steps"""
    trace = DeviationTrace(variant="tf", distances=[4.0, 3.0, 3.5, 1.0, 1.0])
    assert trace.decreasing_fraction() == pytest.approx(0.5)
