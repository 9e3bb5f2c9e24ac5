"""Four-stage convolutional encoder"""
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import torch.nn.functional as F
from torch import nn

from src.common.errors import ShapeMismatchError
from src.core.tensor import Tensor


@dataclass
class EncoderFeatures:
    """Multi-level features at 1/4, 1/8, 1/16 and 1/32 of the input resolution"""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def level(self, level: int) -> Tensor:
        if level not in (1, 2, 3, 4):
            raise ValueError(f"feature level must be 1..4, got {level}")
        return getattr(self, f"f{level}")

    def high(self) -> Dict[int, Tensor]:
        """Levels fed to the restoration process"""
        return {3: self.f3, 4: self.f4}

    def low(self) -> Tuple[Tensor, Tensor]:
        return self.f1, self.f2

    def replace(self, level: int, value: Tensor) -> "EncoderFeatures":
        fields = {f"f{i}": self.level(i) for i in (1, 2, 3, 4)}
        fields[f"f{level}"] = value
        return EncoderFeatures(**fields)

    def detach(self) -> "EncoderFeatures":
        return EncoderFeatures(self.f1.detach(), self.f2.detach(), self.f3.detach(), self.f4.detach())


def _stage(in_channels: int, out_channels: int, downsamples: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    channels = in_channels
    for _ in range(downsamples):
        layers += [nn.Conv2d(channels, out_channels, 3, stride=2, padding=1), nn.GELU()]
        channels = out_channels
    layers += [nn.Conv2d(out_channels, out_channels, 3, padding=1), nn.GELU()]
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """Strided 3x3 conv stages with GELU; the first stage downsamples twice"""

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.stage1 = _stage(3, c1, 2)
        self.stage2 = _stage(c1, c2, 1)
        self.stage3 = _stage(c2, c3, 1)
        self.stage4 = _stage(c3, c4, 1)

    @staticmethod
    def _check(image: Tensor) -> None:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeMismatchError(f"expected (N, 3, H, W) images, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeMismatchError(f"image dims {h}x{w} must be divisible by 32")

    def low_level(self, image: Tensor) -> Tuple[Tensor, Tensor]:
        """First two stages only, used for the auxiliary view"""
        self._check(image)
        f1 = self.stage1(image - 0.5)
        return f1, self.stage2(f1)

    def forward(self, image: Tensor) -> EncoderFeatures:
        f1, f2 = self.low_level(image)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return EncoderFeatures(f1, f2, f3, f4)


def encode(encoder: Encoder, image: Tensor) -> EncoderFeatures:
    """
    Extract multi-level features from an image

    Args:
        encoder: Encoder module
        image: (3, H, W) or (N, 3, H, W) in [0, 1], H and W divisible by 32

    Returns:
        EncoderFeatures, unbatched when the image was
    """
    if image.dim() == 3:
        feats = encoder(image.unsqueeze(0))
        return EncoderFeatures(*(feats.level(i).squeeze(0) for i in (1, 2, 3, 4)))
    return encoder(image)


def upsample(x: Tensor, factor: int) -> Tensor:
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
