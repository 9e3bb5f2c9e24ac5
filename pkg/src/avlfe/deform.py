"""Deformable sampling with learned offsets and modulation"""
import math
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from src.common.errors import ShapeMismatchError
from src.core.tensor import Tensor


def kernel_grid(points: int) -> Tuple[Tuple[int, int], ...]:
    """(dy, dx) base positions of a square neighborhood with `points` entries, row-major"""
    side = math.isqrt(points)
    if side * side != points or side % 2 == 0:
        raise ShapeMismatchError(f"points must be an odd square (1, 9, 25, ...), got {points}")
    half = side // 2
    return tuple((dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1))


def deform_gather(feature: Tensor, offsets: Tensor) -> Tensor:
    """
    Bilinear samples of a feature at base-grid + offset positions, clamped to the borders

    Args:
        feature: (N, C, H, W)
        offsets: (N, 2k, H, W), channel 2i holds dy and 2i+1 holds dx of point i

    Returns:
        (N, C, k, H, W) sampled values
    """
    n, c, h, w = feature.shape
    if offsets.dim() != 4 or offsets.shape[0] != n or offsets.shape[-2:] != (h, w):
        raise ShapeMismatchError(
            f"offsets {tuple(offsets.shape)} do not match feature {tuple(feature.shape)}"
        )
    if offsets.shape[1] % 2 != 0:
        raise ShapeMismatchError(f"offsets need an even channel count, got {offsets.shape[1]}")
    points = offsets.shape[1] // 2
    base = kernel_grid(points)

    ys = torch.arange(h, dtype=feature.dtype, device=feature.device).view(1, h, 1)
    xs = torch.arange(w, dtype=feature.dtype, device=feature.device).view(1, 1, w)
    samples = []
    for i, (dy, dx) in enumerate(base):
        pos_y = ys + dy + offsets[:, 2 * i]
        pos_x = xs + dx + offsets[:, 2 * i + 1]
        grid = torch.stack(
            [2.0 * pos_x / max(w - 1, 1) - 1.0, 2.0 * pos_y / max(h - 1, 1) - 1.0], dim=-1
        )
        samples.append(
            F.grid_sample(feature, grid, mode="bilinear", padding_mode="border", align_corners=True)
        )
    return torch.stack(samples, dim=2)


def deform_sample(feature: Tensor, offsets: Tensor, weights: Optional[Tensor] = None) -> Tensor:
    """
    Per pixel, weighted sum of bilinear samples at (grid + offset) positions

    Args:
        feature: (C, H, W) or (N, C, H, W)
        offsets: (2k, H, W) or (N, 2k, H, W)
        weights: (k, H, W) or (N, k, H, W) per-point weights; uniform 1/k when None

    Returns:
        Tensor shaped like feature
    """
    batched = feature.dim() == 4
    if not batched:
        feature, offsets = feature.unsqueeze(0), offsets.unsqueeze(0)
        weights = None if weights is None else weights.unsqueeze(0)

    gathered = deform_gather(feature, offsets)
    points = gathered.shape[2]
    if weights is None:
        out = gathered.mean(dim=2)
    else:
        if weights.shape[1] != points:
            raise ShapeMismatchError(f"expected {points} weights per pixel, got {weights.shape[1]}")
        out = (gathered * weights.unsqueeze(1)).sum(dim=2)
    return out if batched else out.squeeze(0)


class DeformableSampler(nn.Module):
    """
    3x3 deformable convolution aligning the auxiliary feature to the main one

    Offsets and sigmoid modulation weights are predicted from concat(f_main, f_aux)
    by a zero-initialized conv, so the sampler starts on the identity grid with
    uniform weights.
    """

    def __init__(self, channels: int, points: int = 9):
        super().__init__()
        self.points = points
        kernel_grid(points)
        self.offset_net = nn.Conv2d(2 * channels, 3 * points, 3, padding=1)
        nn.init.zeros_(self.offset_net.weight)
        nn.init.zeros_(self.offset_net.bias)

        self.weight = nn.Parameter(torch.empty(channels, channels, points))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def predict_offsets(self, f_main: Tensor, f_aux: Tensor) -> Tuple[Tensor, Tensor]:
        """(offsets (N, 2k, H, W), modulation weights (N, k, H, W))"""
        out = self.offset_net(torch.cat([f_main, f_aux], dim=1))
        offsets = out[:, : 2 * self.points]
        modulation = torch.sigmoid(out[:, 2 * self.points :])
        return offsets, modulation

    def forward(self, f_main: Tensor, f_aux: Tensor) -> Tensor:
        offsets, modulation = self.predict_offsets(f_main, f_aux)
        gathered = deform_gather(f_aux, offsets) * modulation.unsqueeze(1)
        aligned = torch.einsum("oik,nikhw->nohw", self.weight, gathered)
        return F.gelu(aligned + self.bias.view(1, -1, 1, 1))
