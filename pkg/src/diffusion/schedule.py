"""Noise schedule construction and forward noising of features"""
import math
from dataclasses import dataclass
from typing import List, Tuple, Union

import torch

from src.common.errors import RestoredDepthError
from src.core.tensor import Tensor, check_same_shape

Step = Union[int, Tensor]


class ScheduleError(RestoredDepthError):
    """Raised for invalid schedule parameters or out-of-range steps"""
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Per-step noise coefficients

    All sequences are indexed by step t = 0..T; entry 0 is the clean end
    (alpha[0] = alpha_bar[0] = beta_bar[0] = 0).
    """

    T: int
    kind: str
    alpha: Tuple[float, ...]
    alpha_bar: Tuple[float, ...]
    beta_bar: Tuple[float, ...]
    literal_eq9: bool = False

    def check_step(self, t: int, allow_zero: bool = False) -> None:
        low = 0 if allow_zero else 1
        if not low <= t <= self.T:
            raise ScheduleError(f"step {t} outside [{low}, {self.T}]")

    def coefficient(self, values: Tuple[float, ...], t: Step, like: Tensor) -> Tensor:
        """Gather values[t] as a tensor broadcastable against a batched feature"""
        if isinstance(t, int):
            self.check_step(t, allow_zero=True)
            return torch.tensor(values[t], dtype=like.dtype, device=like.device)
        if int(t.min()) < 0 or int(t.max()) > self.T:
            raise ScheduleError(f"steps {t.tolist()} outside [0, {self.T}]")
        table = torch.tensor(values, dtype=like.dtype, device=like.device)
        shape = (-1,) + (1,) * (like.dim() - 1)
        return table[t.long()].reshape(shape)

    def inference_steps(self, steps: int) -> List[int]:
        """
        Evenly spaced visited steps from T down to 0

        steps == T visits every step; steps == 0 visits only T.
        """
        if not 0 <= steps <= self.T:
            raise ScheduleError(f"inference steps {steps} outside [0, {self.T}]")
        if steps == 0:
            return [self.T]
        return [math.floor(self.T * k / steps + 0.5) for k in range(steps, -1, -1)]

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "literal_eq9": self.literal_eq9}


def build_schedule(T: int, kind: str = "linear", literal_eq9: bool = False) -> NoiseSchedule:
    """
    Build a noise schedule

    The linear kind sets alpha_bar_t = t/T, alpha_t = sqrt(alpha_bar_t^2 - alpha_bar_{t-1}^2)
    and beta_bar_t = t/T, so alpha_bar_T = 1 and both cumulative sequences telescope to 1.

    Args:
        T: Number of forward steps (>= 1)
        kind: Schedule shape; only "linear"
        literal_eq9: Subtract the full predicted degradation at every reverse step

    Returns:
        NoiseSchedule
    """
    if T < 1:
        raise ScheduleError(f"schedule needs at least one step, got T={T}")
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind '{kind}'")

    alpha_bar = tuple(t / T for t in range(T + 1))
    alpha = (0.0,) + tuple(
        math.sqrt(alpha_bar[t] ** 2 - alpha_bar[t - 1] ** 2) for t in range(1, T + 1)
    )
    beta_bar = tuple(t / T for t in range(T + 1))
    return NoiseSchedule(
        T=T,
        kind=kind,
        alpha=alpha,
        alpha_bar=alpha_bar,
        beta_bar=beta_bar,
        literal_eq9=literal_eq9,
    )


def forward_noise(F_in: Tensor, t: Step, sched: NoiseSchedule, eps: Tensor) -> Tensor:
    """
    Add scheduled noise to a feature without rescaling it: F_in + alpha_bar_t * eps

    Args:
        F_in: Input feature (C, H, W) or batch (N, C, H, W)
        t: Step in [1, T] (0 is the noise-free limit), or a per-sample LongTensor
        sched: Noise schedule
        eps: Noise shaped like F_in

    Returns:
        Noisy feature F_t
    """
    check_same_shape(F_in, eps, "feature and noise")
    return F_in + sched.coefficient(sched.alpha_bar, t, F_in) * eps
