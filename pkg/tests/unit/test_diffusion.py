"""Unit tests for conditions, restoration network and the reverse sampler"""
import pytest
import torch

from src.common.errors import ShapeMismatchError
from src.diffusion.conditions import build_conditions, condition_channels
from src.diffusion.oracle import OraclePredictor
from src.diffusion.restoration import FeatureRestorer, RestorationNet, predict
from src.diffusion.sampler import (
    feature_distance,
    one_step_estimate,
    restore,
    reverse_step,
    sample_noise,
)
from src.diffusion.schedule import ScheduleError, build_schedule, forward_noise


def level_pair(value3: float = 0.0, value4: float = 0.0):
    """Level-3 (1, 4, 2, 2) and level-4 (1, 16, 1, 1) features filled with constants"""
    return {3: torch.full((1, 4, 2, 2), value3), 4: torch.full((1, 16, 1, 1), value4)}


def random_pair(seed: int):
    generator = torch.Generator().manual_seed(seed)
    return {
        3: torch.randn(1, 4, 4, 4, generator=generator),
        4: torch.randn(1, 16, 2, 2, generator=generator),
    }


def test_condition_shapes():
    """Level-4 256@4x4 becomes a 64@8x8 condition for level 3 and vice versa"""
    f3, f4 = torch.randn(128, 8, 8), torch.randn(256, 4, 4)
    assert build_conditions(f3, f4, 3).C_mul.shape == (64, 8, 8)
    assert build_conditions(f3, f4, 4).C_mul.shape == (512, 4, 4)
    assert condition_channels(128, 256, 3) == 64
    assert condition_channels(256, 128, 4) == 512


def test_condition_preserves_values():
    """Condition maps are permutations of the other level's values"""
    f3, f4 = torch.randn(8, 4, 4), torch.randn(16, 2, 2)
    cond = build_conditions(f3, f4, 3).C_mul
    assert torch.equal(cond.flatten().sort().values, f4.flatten().sort().values)


def test_condition_identity_for_r1():
    """r=1 hands the other feature through unchanged"""
    f3, f4 = torch.randn(4, 3, 3), torch.randn(4, 3, 3)
    assert torch.equal(build_conditions(f3, f4, 3, r=1).C_mul, f4)


def test_condition_rejects_bad_scale():
    """Level-3 dims must be twice level-4 dims"""
    with pytest.raises(ShapeMismatchError):
        build_conditions(torch.randn(4, 8, 8), torch.randn(16, 3, 3), 3)
    with pytest.raises(ShapeMismatchError):
        build_conditions(torch.randn(4, 4, 4), torch.randn(16, 2, 2), 2)


def test_zero_init_heads_predict_zero():
    """Fresh restoration network predicts zero degradation and noise"""
    net = RestorationNet(4, condition_channels(4, 16, 3), T=3, width=8, blocks=1, time_embed_dim=8)
    pair = random_pair(0)
    cond = build_conditions(pair[3], pair[4], 3)
    deg, eps = predict(net, pair[3], 2, cond)
    assert deg.shape == pair[3].shape and eps.shape == pair[3].shape
    assert bool((deg == 0).all()) and bool((eps == 0).all())


def test_predict_is_deterministic_and_checks_step():
    """Same inputs give bit-identical outputs; steps outside [1, T] raise"""
    torch.manual_seed(0)
    restorer = FeatureRestorer(4, 16, T=3, width=8, blocks=1, time_embed_dim=8)
    with torch.no_grad():
        for param in restorer.parameters():
            param.copy_(0.1 * torch.randn_like(param))
    pair = random_pair(1)
    cond = build_conditions(pair[3], pair[4], 4)
    first = restorer.predict_level(4, pair[4], 3, cond)
    second = restorer.predict_level(4, pair[4], 3, cond)
    assert torch.equal(first[0], second[0]) and torch.equal(first[1], second[1])
    assert not bool((first[0] == 0).all())
    with pytest.raises(ScheduleError):
        restorer.predict_level(4, pair[4], 0, cond)
    with pytest.raises(ScheduleError):
        restorer.predict_level(4, pair[4], 4, cond)


def test_one_step_estimate_with_oracle():
    """Oracle predictions cancel back to the clean feature"""
    sched = build_schedule(6)
    generator = torch.Generator().manual_seed(2)
    gt, deg, eps = (torch.randn(3, 4, 4, generator=generator) for _ in range(3))
    for t in range(1, 7):
        noisy = forward_noise(gt + deg, t, sched, eps)
        assert (one_step_estimate(noisy, t, (deg, eps), sched) - gt).abs().max() < 1e-6


def test_one_step_estimate_zero_predictions():
    """Zero predictions leave the feature unchanged"""
    x = torch.randn(2, 3, 3)
    zero = torch.zeros_like(x)
    assert torch.equal(one_step_estimate(x, 2, (zero, zero), build_schedule(3)), x)


def test_reverse_step_t1_recovers_gt_in_both_modes():
    """T=1: one reverse step lands on the clean feature"""
    gt, deg, eps = torch.tensor([1.0]), torch.tensor([0.3]), torch.tensor([0.7])
    for literal in (False, True):
        sched = build_schedule(1, literal_eq9=literal)
        noisy = forward_noise(gt + deg, 1, sched, eps)
        assert torch.allclose(reverse_step(noisy, 1, (deg, eps), sched), gt)


def test_reverse_step_rejects_t0():
    """There is no step below zero"""
    x = torch.zeros(1)
    with pytest.raises(ScheduleError):
        reverse_step(x, 0, (x, x), build_schedule(2))


def test_restore_t2_worked_example():
    """F_gt=1, F_deg=0.4, eps=-0.2 visits 1.2, 1.1, 1.0"""
    sched = build_schedule(2)
    features = level_pair(1.4, 1.4)
    degradation = level_pair(0.4, 0.4)
    noise = level_pair(-0.2, -0.2)
    trace = restore(OraclePredictor(degradation, noise), features, sched, steps=2, noise=noise)
    assert trace.steps == [2, 1, 0]
    for feature, expected in zip(trace.features, [1.2, 1.1, 1.0]):
        assert torch.allclose(feature[3], torch.full_like(feature[3], expected), atol=1e-6)
        assert torch.allclose(feature[4], torch.full_like(feature[4], expected), atol=1e-6)


def test_restore_literal_mode_over_subtracts():
    """Literal removal ends at F_gt - (T-1) F_deg"""
    for T in (2, 6):
        sched = build_schedule(T, literal_eq9=True)
        degradation = level_pair(0.4, 0.4)
        noise = level_pair(-0.2, -0.2)
        trace = restore(
            OraclePredictor(degradation, noise), level_pair(1.4, 1.4), sched, T, noise=noise
        )
        expected = 1.0 - (T - 1) * 0.4
        assert torch.allclose(trace.final[3], torch.full_like(trace.final[3], expected), atol=1e-5)
        divergence = feature_distance(trace.final, level_pair(1.0, 1.0))
        assert divergence >= (T - 1) * feature_distance(degradation, level_pair()) / T


@pytest.mark.parametrize("T", [1, 2, 6])
def test_restore_oracle_recovers_gt(T):
    """Oracle sampler telescopes back to F_gt for any T"""
    sched = build_schedule(T)
    gt, degradation, noise = random_pair(10), random_pair(11), random_pair(12)
    features = {level: gt[level] + degradation[level] for level in gt}
    trace = restore(OraclePredictor(degradation, noise), features, sched, T, noise=noise)
    assert len(trace.features) == T + 1
    for level in (3, 4):
        assert (trace.final[level] - gt[level]).abs().max() < 1e-5


def test_restore_oracle_with_skipped_steps():
    """Fewer inference steps than T still telescope exactly"""
    sched = build_schedule(6)
    gt, degradation, noise = random_pair(20), random_pair(21), random_pair(22)
    features = {level: gt[level] + degradation[level] for level in gt}
    trace = restore(OraclePredictor(degradation, noise), features, sched, 3, noise=noise)
    assert trace.steps == [6, 4, 2, 0]
    for level in (3, 4):
        assert (trace.final[level] - gt[level]).abs().max() < 1e-5


def test_restore_oracle_deviation_strictly_decreases():
    """Distance to F_gt shrinks at every oracle step"""
    sched = build_schedule(6)
    gt, degradation, noise = random_pair(30), random_pair(31), random_pair(32)
    features = {level: gt[level] + degradation[level] for level in gt}
    trace = restore(
        OraclePredictor(degradation, noise), features, sched, 6, noise=noise, reference=gt
    )
    assert len(trace.deviations) == 7
    assert all(b < a for a, b in zip(trace.deviations, trace.deviations[1:]))


def test_restore_zero_steps_keeps_only_f_T():
    """steps=0 records the noised starting point alone"""
    trace = restore(OraclePredictor(level_pair(), level_pair()), level_pair(1.0), build_schedule(3), 0)
    assert trace.steps == [3]
    assert len(trace.features) == 1 and trace.predictions == []


def test_restore_is_seed_deterministic():
    """Same seed gives identical traces; another seed differs"""
    torch.manual_seed(0)
    restorer = FeatureRestorer(4, 16, T=3, width=8, blocks=1, time_embed_dim=8)
    with torch.no_grad():
        for param in restorer.parameters():
            param.copy_(0.1 * torch.randn_like(param))
    features = random_pair(40)
    sched = build_schedule(3)
    with torch.no_grad():
        a = restore(restorer, features, sched, 3, seed=7)
        b = restore(restorer, features, sched, 3, seed=7)
        c = restore(restorer, features, sched, 3, seed=8)
        fixed = restore(restorer, features, sched, 3, seed=7, condition_mode="fixed")
    for fa, fb in zip(a.features, b.features):
        assert torch.equal(fa[3], fb[3]) and torch.equal(fa[4], fb[4])
    assert not torch.equal(a.final[3], c.final[3])
    assert len(fixed.features) == 4
    with pytest.raises(ValueError):
        restore(restorer, features, sched, 3, condition_mode="stale")


def test_sample_noise_is_seeded():
    """Noise depends only on the seed and shapes"""
    features = level_pair()
    a, b = sample_noise(features, 3), sample_noise(features, 3)
    assert torch.equal(a[3], b[3]) and torch.equal(a[4], b[4])
    assert a[3].shape == features[3].shape
