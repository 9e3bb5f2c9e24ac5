"""AV-LFE module replacing the low-level shortcut connections"""
from enum import Enum
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from src.core.tensor import Tensor, check_same_shape
from src.avlfe.deform import DeformableSampler


class AVLFEMode(str, Enum):
    """How the module takes part in the pipeline"""
    OFF = "off"
    COMPATIBLE = "compatible"
    FULL = "full"


class AVLFEModule(nn.Module):
    """
    Aligns an auxiliary-view feature to the main view and fuses both

    output = f_main + f_Conv(concat(f_main, f_DfConv(f_main, f_aux)))

    f_Conv is 3x3 conv, GELU, 3x3 conv with a linear output, so the correction
    can lower activations as freely as raise them. The last fusion conv starts
    at zero, so a fresh module passes f_main through.
    """

    def __init__(self, channels: int, points: int = 9, mode: AVLFEMode = AVLFEMode.OFF):
        super().__init__()
        self.channels = channels
        self.mode = AVLFEMode(mode)
        self.sampler = DeformableSampler(channels, points)
        self.fuse1 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.fuse2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.fuse2.weight)
        nn.init.zeros_(self.fuse2.bias)

    def forward(self, f_main: Tensor, f_aux: Optional[Tensor]) -> Tensor:
        if self.mode == AVLFEMode.OFF or f_aux is None:
            return f_main
        check_same_shape(f_main, f_aux, "main and auxiliary features")
        aligned = self.sampler(f_main, f_aux)
        correction = self.fuse2(F.gelu(self.fuse1(torch.cat([f_main, aligned], dim=1))))
        return f_main + correction


def avlfe_forward(f_main: Tensor, f_aux: Optional[Tensor], module: AVLFEModule) -> Tensor:
    """Enhanced shortcut feature for one low level; mode=off returns f_main itself"""
    return module(f_main, f_aux)


class LowLevelEnhancer(nn.Module):
    """AV-LFE modules for both low levels (1 and 2)"""

    def __init__(self, level1_channels: int, level2_channels: int, points: int = 9):
        super().__init__()
        self.level1 = AVLFEModule(level1_channels, points)
        self.level2 = AVLFEModule(level2_channels, points)

    @property
    def mode(self) -> AVLFEMode:
        return self.level1.mode

    def set_mode(self, mode: AVLFEMode) -> None:
        self.level1.mode = AVLFEMode(mode)
        self.level2.mode = AVLFEMode(mode)

    def forward(
        self, f1: Tensor, f2: Tensor, aux: Optional[Tuple[Tensor, Tensor]]
    ) -> Tuple[Tensor, Tensor]:
        if aux is None or self.mode == AVLFEMode.OFF:
            return f1, f2
        return self.level1(f1, aux[0]), self.level2(f2, aux[1])
