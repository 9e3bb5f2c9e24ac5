"""Tensor primitives shared by every package"""
import torch
import torch.nn.functional as F

from src.common.errors import RestoredDepthError, ShapeMismatchError

Tensor = torch.Tensor


class NonFiniteTensorError(RestoredDepthError):
    """Raised when a tensor holds NaN or Inf where finite values are required"""
    pass


def ensure_finite(x: Tensor, what: str = "tensor") -> Tensor:
    """Raise if x holds any NaN/Inf, otherwise return x unchanged"""
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteTensorError(f"{what} contains non-finite values")
    return x


def check_same_shape(a: Tensor, b: Tensor, what: str = "tensors") -> None:
    """Raise ShapeMismatchError unless a and b have identical shapes"""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """
    Depth-to-space rearrangement on the last three axes (C*r^2, H, W) -> (C, r*H, r*W)

    Output (c, r*h + dy, r*w + dx) holds input (c*r^2 + dy*r + dx, h, w).

    Args:
        x: Tensor of shape (..., C*r^2, H, W)
        r: Upscale factor

    Returns:
        Tensor of shape (..., C, r*H, r*W)
    """
    if r < 1:
        raise ShapeMismatchError(f"upscale factor must be >= 1, got {r}")
    if x.dim() < 3:
        raise ShapeMismatchError(f"pixel_shuffle needs (C, H, W) axes, got {tuple(x.shape)}")
    channels = x.shape[-3]
    if channels % (r * r) != 0:
        raise ShapeMismatchError(f"channel axis {channels} not divisible by r^2 = {r * r}")
    if r == 1:
        return x
    return F.pixel_shuffle(x, r)


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """
    Inverse of pixel_shuffle with the same index map: (C, r*H, r*W) -> (C*r^2, H, W)

    Args:
        x: Tensor of shape (..., C, r*H, r*W)
        r: Downscale factor

    Returns:
        Tensor of shape (..., C*r^2, H, W)
    """
    if r < 1:
        raise ShapeMismatchError(f"downscale factor must be >= 1, got {r}")
    if x.dim() < 3:
        raise ShapeMismatchError(f"space_to_depth needs (C, H, W) axes, got {tuple(x.shape)}")
    height, width = x.shape[-2], x.shape[-1]
    if height % r != 0 or width % r != 0:
        raise ShapeMismatchError(f"spatial dims {height}x{width} not divisible by {r}")
    if r == 1:
        return x
    return F.pixel_unshuffle(x, r)
