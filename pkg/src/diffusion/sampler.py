"""One-step restored estimate, deterministic reverse steps and the multi-step sampler"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol

import torch

from src.common.logging import get_logger
from src.core.tensor import Tensor, check_same_shape
from src.diffusion.conditions import RESTORED_LEVELS, ConditionMaps, build_conditions
from src.diffusion.restoration import Predictions
from src.diffusion.schedule import NoiseSchedule, ScheduleError, Step, forward_noise

logger = get_logger(__name__)

Features = Dict[int, Tensor]


class LevelPredictor(Protocol):
    """Anything that predicts (F_deg, eps) for a noisy feature of a given level"""

    def predict_level(self, level: int, F_t: Tensor, t: Step, cond: ConditionMaps) -> Predictions:
        ...


@dataclass
class RestorationTrace:
    """Features visited by the sampler, from F_T down to the last visited step"""

    steps: List[int] = field(default_factory=list)
    features: List[Features] = field(default_factory=list)
    predictions: List[Dict[int, Predictions]] = field(default_factory=list)
    deviations: Optional[List[float]] = None

    @property
    def final(self) -> Features:
        return self.features[-1]


def one_step_estimate(F_t: Tensor, t: Step, predictions: Predictions, sched: NoiseSchedule) -> Tensor:
    """
    Restored feature estimate F0 = F_t - F_deg - alpha_bar_t * eps

    With sched.literal_eq9 the printed factor (alpha_bar_t - alpha_bar_{t-1})
    replaces alpha_bar_t.

    Args:
        F_t: Noisy feature
        t: Step in [1, T] (int or per-sample tensor)
        predictions: (F_deg, eps) predicted for F_t
        sched: Noise schedule

    Returns:
        F0 estimate shaped like F_t
    """
    deg, eps = predictions
    check_same_shape(F_t, deg, "feature and degradation")
    check_same_shape(F_t, eps, "feature and noise")
    if isinstance(t, int):
        sched.check_step(t)

    coef = sched.coefficient(sched.alpha_bar, t, F_t)
    if sched.literal_eq9:
        coef = coef - sched.coefficient(sched.alpha_bar, t - 1, F_t)
    return F_t - deg - coef * eps


def reverse_step(
    F_t: Tensor,
    t: int,
    predictions: Predictions,
    sched: NoiseSchedule,
    t_prev: Optional[int] = None,
) -> Tensor:
    """
    Deterministic reverse step from t to t_prev (default t - 1)

    Default: F_t - (beta_bar_t - beta_bar_prev) F_deg - (alpha_bar_t - alpha_bar_prev) eps.
    Literal mode subtracts the full F_deg at every step.

    Args:
        F_t: Current feature
        t: Current step (>= 1)
        predictions: (F_deg, eps) predicted at t
        sched: Noise schedule
        t_prev: Target step, 0 <= t_prev < t

    Returns:
        Feature at t_prev
    """
    if t < 1:
        raise ScheduleError(f"reverse step needs t >= 1, got {t}")
    sched.check_step(t)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ScheduleError(f"target step {t_prev} must lie in [0, {t})")

    deg, eps = predictions
    check_same_shape(F_t, deg, "feature and degradation")
    check_same_shape(F_t, eps, "feature and noise")

    noise_weight = sched.alpha_bar[t] - sched.alpha_bar[t_prev]
    deg_weight = 1.0 if sched.literal_eq9 else sched.beta_bar[t] - sched.beta_bar[t_prev]
    return F_t - deg_weight * deg - noise_weight * eps


def sample_noise(features: Features, seed: int) -> Features:
    """Seeded standard-normal noise for each level, drawn in level order"""
    generator = torch.Generator().manual_seed(seed)
    noise = {}
    for level in sorted(features):
        x = features[level]
        noise[level] = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
    return noise


def noisy_conditions(noisy: Features) -> Dict[int, ConditionMaps]:
    return {level: build_conditions(noisy[3], noisy[4], level) for level in RESTORED_LEVELS}


def restore(
    predictor: LevelPredictor,
    features: Features,
    sched: NoiseSchedule,
    steps: int,
    seed: int = 0,
    condition_mode: str = "rebuilt",
    noise: Optional[Features] = None,
    reference: Optional[Features] = None,
) -> RestorationTrace:
    """
    Restore the high-level features by iterating reverse steps from F_T

    F_T = F_in + alpha_bar_T * eps with seeded eps; conditions are rebuilt from the
    current noisy features each step ("rebuilt") or kept from F_T ("fixed").

    Args:
        predictor: Restoration network (or an oracle) for levels 3 and 4
        features: Encoder features {3: f3, 4: f4}
        sched: Noise schedule
        steps: Number of reverse steps, at most sched.T
        seed: Seed for the initial noise
        condition_mode: "rebuilt" or "fixed"
        noise: Explicit initial noise per level (overrides seed)
        reference: Features to measure per-step L2 deviation against

    Returns:
        RestorationTrace of length steps + 1
    """
    if condition_mode not in ("rebuilt", "fixed"):
        raise ValueError(f"unknown condition mode '{condition_mode}'")
    visited = sched.inference_steps(steps)
    eps = noise if noise is not None else sample_noise(features, seed)

    current = {
        level: forward_noise(features[level], sched.T, sched, eps[level]) for level in RESTORED_LEVELS
    }
    trace = RestorationTrace(steps=[visited[0]], features=[current])
    fixed = noisy_conditions(current) if condition_mode == "fixed" else None

    for t, t_prev in zip(visited[:-1], visited[1:]):
        conds = fixed if fixed is not None else noisy_conditions(current)
        preds = {
            level: predictor.predict_level(level, current[level], t, conds[level])
            for level in RESTORED_LEVELS
        }
        current = {
            level: reverse_step(current[level], t, preds[level], sched, t_prev)
            for level in RESTORED_LEVELS
        }
        trace.steps.append(t_prev)
        trace.features.append(current)
        trace.predictions.append(preds)

    if reference is not None:
        trace.deviations = [feature_distance(f, reference) for f in trace.features]

    logger.debug(f"Restored features over steps {trace.steps}")
    return trace


def feature_distance(a: Features, b: Features) -> float:
    """Joint L2 distance over both restored levels"""
    total = sum(float(((a[level] - b[level]) ** 2).sum()) for level in RESTORED_LEVELS)
    return total**0.5
