"""Adaptive-bins depth head"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from src.common.errors import RestoredDepthError, ShapeMismatchError
from src.core.tensor import Tensor

PROB_TOLERANCE = 1e-5


class NonNormalizedProbsError(RestoredDepthError):
    """Raised when bin probabilities do not sum to one per pixel"""
    pass


@dataclass
class BinsPrediction:
    """
    Image-dependent bin centers and per-pixel bin probabilities

    centers: (N, B) strictly increasing depths in meters
    probs: (N, B, H', W') softmax over the bin axis
    """

    centers: Tensor
    probs: Tensor


@dataclass
class DepthMap:
    """Depth in meters, (N, 1, H, W), bounded by [d_min, d_max]"""

    values: Tensor
    d_min: float = 0.5
    d_max: float = 80.0


class BinsHead(nn.Module):
    """
    Predicts bin centers from pooled f4' and per-pixel bin logits from the decoder tail

    Bin widths are a softmax over an MLP of the pooled feature scaled to
    (d_max - d_min); centers are the midpoints of the cumulative edges.
    """

    def __init__(
        self,
        in_channels: int,
        global_channels: int,
        bins: int = 64,
        d_min: float = 0.5,
        d_max: float = 80.0,
        hidden: int = 128,
    ):
        super().__init__()
        self.bins = bins
        self.d_min = d_min
        self.d_max = d_max
        self.logits = nn.Conv2d(in_channels, bins, 1)
        self.widths = nn.Sequential(
            nn.Linear(global_channels, hidden), nn.GELU(), nn.Linear(hidden, bins)
        )

    def centers(self, global_feature: Tensor) -> Tensor:
        pooled = global_feature.mean(dim=(-2, -1))
        widths = torch.softmax(self.widths(pooled), dim=1) * (self.d_max - self.d_min)
        edges = self.d_min + torch.cumsum(widths, dim=1)
        edges = torch.cat([torch.full_like(edges[:, :1], self.d_min), edges], dim=1)
        return 0.5 * (edges[:, :-1] + edges[:, 1:])

    def forward(self, tail_feature: Tensor, global_feature: Tensor) -> BinsPrediction:
        return BinsPrediction(
            centers=self.centers(global_feature),
            probs=torch.softmax(self.logits(tail_feature), dim=1),
        )


def bins_to_depth(b: BinsPrediction, d_min: float = 0.5, d_max: float = 80.0) -> DepthMap:
    """
    Expected depth under the per-pixel bin distribution, clamped to [d_min, d_max]

    Accepts unbatched centers (B,) with probs (B, H, W) as well.
    """
    centers, probs = b.centers, b.probs
    if centers.dim() == 1:
        centers, probs = centers.unsqueeze(0), probs.unsqueeze(0)
    if probs.dim() != 4 or centers.shape != probs.shape[:2]:
        raise ShapeMismatchError(
            f"centers {tuple(centers.shape)} do not match probs {tuple(probs.shape)}"
        )

    total = probs.sum(dim=1)
    if not bool(((total - 1.0).abs() < PROB_TOLERANCE).all()):
        worst = float((total - 1.0).abs().max())
        raise NonNormalizedProbsError(f"bin probabilities deviate from 1 by up to {worst:.3e}")

    depth = (probs * centers[:, :, None, None]).sum(dim=1, keepdim=True)
    return DepthMap(depth.clamp(d_min, d_max), d_min, d_max)


def upsample_depth(depth: DepthMap, factor: int) -> DepthMap:
    values = F.interpolate(depth.values, scale_factor=factor, mode="bilinear", align_corners=False)
    return DepthMap(values.clamp(depth.d_min, depth.d_max), depth.d_min, depth.d_max)
