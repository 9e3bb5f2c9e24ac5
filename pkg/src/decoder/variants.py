"""Convolutional and transformer decoder blocks sized to the invertible block's budget"""
from typing import Literal

import torch.nn.functional as F
from torch import nn

from src.common.logging import get_logger
from src.core.tensor import Tensor
from src.decoder.invertible import InvertibleDecoder

logger = get_logger(__name__)

DecoderVariant = Literal["inv", "conv", "tf"]

MODULE_NAMES = {"inv": "invdec", "conv": "convdec", "tf": "tfdec"}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class ConvBlock(nn.Module):
    """Residual pair of 3x3 convolutions with GELU"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.gelu(self.conv1(x)))


class ConvDecoderBlock(nn.Module):
    """Stack of residual conv blocks"""

    def __init__(self, channels: int, blocks: int):
        super().__init__()
        self.blocks = nn.Sequential(*[ConvBlock(channels) for _ in range(blocks)])

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(x)


class TransformerDecoderBlock(nn.Module):
    """Self-attention over spatial tokens followed by a GELU MLP"""

    def __init__(self, channels: int, layers: int, feedforward: int, heads: int):
        super().__init__()
        self.encoder = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(
                d_model=channels,
                nhead=heads,
                dim_feedforward=feedforward,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
            ),
            num_layers=layers,
            enable_nested_tensor=False,
        )

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = self.encoder(tokens)
        return tokens.transpose(1, 2).reshape(n, c, h, w)


def _heads_for(channels: int) -> int:
    for heads in (8, 4, 2, 1):
        if channels % heads == 0:
            return heads
    return 1


def build_decoder_block(variant: DecoderVariant, channels: int, hidden: int = 64) -> nn.Module:
    """
    Build the decoder block for a variant with a parameter count matched to the invertible block

    Args:
        variant: "inv", "conv" or "tf"
        channels: Channels of the restored feature entering the block
        hidden: Hidden width of the coupling subnetworks (sets the budget)

    Returns:
        Module mapping (N, C, H, W) -> (N, C, H, W)
    """
    invertible = InvertibleDecoder(channels, hidden)
    if variant == "inv":
        return invertible

    budget = count_parameters(invertible)
    if variant == "conv":
        per_block = 2 * (9 * channels * channels + channels)
        blocks = max(1, round(budget / per_block))
        block: nn.Module = ConvDecoderBlock(channels, blocks)
    elif variant == "tf":
        # attention (4C^2 + 4C) and two layer norms (4C) are fixed; the MLP absorbs the rest
        fixed = 4 * channels * channels + 9 * channels
        feedforward = max(channels, round((budget - fixed) / (2 * channels + 1)))
        block = TransformerDecoderBlock(channels, 1, feedforward, _heads_for(channels))
    else:
        raise ValueError(f"unknown decoder variant '{variant}'")

    logger.debug(
        f"Decoder block '{variant}' with {count_parameters(block)} parameters (budget {budget})"
    )
    return block
