"""Restoration network predicting degradation and noise of a noisy feature"""
import math
from typing import Dict, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from src.common.errors import ShapeMismatchError
from src.core.tensor import Tensor, check_same_shape
from src.diffusion.conditions import ConditionMaps, condition_channels
from src.diffusion.schedule import ScheduleError

Predictions = Tuple[Tensor, Tensor]


def timestep_embedding(fraction: Tensor, dim: int) -> Tensor:
    """
    Sinusoidal embedding of t/T

    Args:
        fraction: (N,) values of t/T
        dim: Even embedding width

    Returns:
        (N, dim) embedding
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=fraction.dtype, device=fraction.device) / half
    )
    # t/T mapped onto the [0, 1000] step range
    angles = 1000.0 * fraction[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with GELU and an identity skip"""

    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.gelu(self.conv1(x)))


class RestorationNet(nn.Module):
    """
    R_theta(F_t, t, C_mul) for one feature level

    A conv trunk over concat(F_t, C_mul) with the time embedding added after the
    stem, and two zero-initialized heads for the degradation and the noise.
    """

    def __init__(
        self,
        feature_channels: int,
        cond_channels: int,
        T: int,
        width: int = 128,
        blocks: int = 4,
        time_embed_dim: int = 64,
    ):
        super().__init__()
        self.feature_channels = feature_channels
        self.cond_channels = cond_channels
        self.T = T
        self.time_embed_dim = time_embed_dim

        self.stem = nn.Conv2d(feature_channels + cond_channels, width, 3, padding=1)
        self.time_proj = nn.Linear(time_embed_dim, width)
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(blocks)])
        self.head_deg = nn.Conv2d(width, feature_channels, 3, padding=1)
        self.head_eps = nn.Conv2d(width, feature_channels, 3, padding=1)
        for head in (self.head_deg, self.head_eps):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, F_t: Tensor, t: Union[int, Tensor], cond: Tensor) -> Predictions:
        batched = F_t.dim() == 4
        x = F_t if batched else F_t.unsqueeze(0)
        c = cond if batched else cond.unsqueeze(0)

        steps = torch.as_tensor(t, dtype=x.dtype, device=x.device).reshape(-1)
        if steps.numel() == 1:
            steps = steps.expand(x.shape[0])
        emb = self.time_proj(timestep_embedding(steps / self.T, self.time_embed_dim))

        h = self.stem(torch.cat([x, c], dim=1)) + emb[:, :, None, None]
        h = F.gelu(self.blocks(F.gelu(h)))
        deg, eps = self.head_deg(h), self.head_eps(h)
        if not batched:
            deg, eps = deg.squeeze(0), eps.squeeze(0)
        return deg, eps


def predict(net: RestorationNet, F_t: Tensor, t: Union[int, Tensor], cond: ConditionMaps) -> Predictions:
    """
    Predict (F_deg, eps) for a noisy feature

    Args:
        net: Restoration network for the feature's level
        F_t: Noisy feature
        t: Step in [1, T] (int or per-sample tensor)
        cond: Condition maps for the same level

    Returns:
        Degradation and noise predictions shaped like F_t
    """
    low, high = (t, t) if isinstance(t, int) else (int(t.min()), int(t.max()))
    if low < 1 or high > net.T:
        raise ScheduleError(f"step {t} outside [1, {net.T}]")
    if F_t.shape[-3] != net.feature_channels:
        raise ShapeMismatchError(f"expected {net.feature_channels} channels, got {F_t.shape[-3]}")
    if F_t.shape[-2:] != cond.C_mul.shape[-2:]:
        raise ShapeMismatchError("condition map and feature differ in spatial dims")

    deg, eps = net(F_t, t, cond.C_mul)
    check_same_shape(deg, F_t, "degradation prediction and feature")
    return deg, eps


class FeatureRestorer(nn.Module):
    """Restoration networks for both high-level features"""

    def __init__(
        self,
        level3_channels: int,
        level4_channels: int,
        T: int,
        width: int = 128,
        blocks: int = 4,
        time_embed_dim: int = 64,
    ):
        super().__init__()
        self.level3 = RestorationNet(
            level3_channels,
            condition_channels(level3_channels, level4_channels, 3),
            T,
            width,
            blocks,
            time_embed_dim,
        )
        self.level4 = RestorationNet(
            level4_channels,
            condition_channels(level4_channels, level3_channels, 4),
            T,
            width,
            blocks,
            time_embed_dim,
        )

    def net(self, level: int) -> RestorationNet:
        return self.level3 if level == 3 else self.level4

    def predict_level(
        self, level: int, F_t: Tensor, t: Union[int, Tensor], cond: ConditionMaps
    ) -> Predictions:
        return predict(self.net(level), F_t, t, cond)

    def predict_all(
        self, noisy: Dict[int, Tensor], t: Union[int, Tensor], conds: Dict[int, ConditionMaps]
    ) -> Dict[int, Predictions]:
        return {level: self.predict_level(level, noisy[level], t, conds[level]) for level in noisy}
