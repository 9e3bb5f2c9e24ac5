"""Invertible decoder built from affine coupling layers, with bi-Lipschitz estimation"""
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import torch
from torch import nn

from src.common.errors import RestoredDepthError, ShapeMismatchError
from src.common.logging import get_logger
from src.core.tensor import Tensor

logger = get_logger(__name__)


class DegenerateSampleError(RestoredDepthError):
    """Raised when every sampled pair coincides"""
    pass


def _subnet(in_channels: int, out_channels: int, hidden: int) -> nn.Sequential:
    """3x3 conv, GELU, 3x3 conv; the last conv starts at zero"""
    net = nn.Sequential(
        nn.Conv2d(in_channels, hidden, 3, padding=1),
        nn.GELU(),
        nn.Conv2d(hidden, out_channels, 3, padding=1),
    )
    nn.init.zeros_(net[2].weight)
    nn.init.zeros_(net[2].bias)
    return net


class CouplingLayer(nn.Module):
    """
    Two-sided affine coupling over a channel split at s

    forward:
        y1 = x1 * exp(sigmoid(g2(x2))) + h2(x2)
        y2 = x2 * exp(sigmoid(g1(y1))) + h1(y1)

    The second half conditions on the already-updated first half, so the
    inverse undoes y2 first. Every scale lies strictly inside (1, e).
    """

    def __init__(self, channels: int, hidden: int = 64, split: int = 0):
        super().__init__()
        if channels < 2:
            raise ShapeMismatchError(f"coupling needs at least 2 channels, got {channels}")
        self.channels = channels
        self.split = split or channels // 2
        if not 1 <= self.split < channels:
            raise ShapeMismatchError(f"split {self.split} outside [1, {channels})")

        rest = channels - self.split
        self.g1 = _subnet(self.split, rest, hidden)
        self.h1 = _subnet(self.split, rest, hidden)
        self.g2 = _subnet(rest, self.split, hidden)
        self.h2 = _subnet(rest, self.split, hidden)

    def _check(self, x: Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"coupling expects (N, {self.channels}, H, W), got {tuple(x.shape)}"
            )

    def scales(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Elementwise scale factors applied by forward() to each half"""
        self._check(x)
        x1, x2 = x[:, : self.split], x[:, self.split :]
        scale1 = torch.exp(torch.sigmoid(self.g2(x2)))
        y1 = x1 * scale1 + self.h2(x2)
        scale2 = torch.exp(torch.sigmoid(self.g1(y1)))
        return scale1, scale2

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        x1, x2 = x[:, : self.split], x[:, self.split :]
        y1 = x1 * torch.exp(torch.sigmoid(self.g2(x2))) + self.h2(x2)
        y2 = x2 * torch.exp(torch.sigmoid(self.g1(y1))) + self.h1(y1)
        return torch.cat([y1, y2], dim=1)

    def inverse(self, y: Tensor) -> Tensor:
        self._check(y)
        y1, y2 = y[:, : self.split], y[:, self.split :]
        x2 = (y2 - self.h1(y1)) * torch.exp(-torch.sigmoid(self.g1(y1)))
        x1 = (y1 - self.h2(x2)) * torch.exp(-torch.sigmoid(self.g2(x2)))
        return torch.cat([x1, x2], dim=1)

    def clip_weights(self, limit: float) -> None:
        """Clamp every subnetwork weight into [-limit, limit]"""
        with torch.no_grad():
            for param in self.parameters():
                param.clamp_(-limit, limit)


def _batched(fn: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    if x.dim() == 3:
        return fn(x.unsqueeze(0)).squeeze(0)
    return fn(x)


def coupling_forward(layer: CouplingLayer, F_in: Tensor) -> Tensor:
    """Apply one coupling layer to a (S, H, W) or (N, S, H, W) feature"""
    return _batched(layer.forward, F_in)


def coupling_inverse(layer: CouplingLayer, F_out: Tensor) -> Tensor:
    """Exact analytic inverse of coupling_forward"""
    return _batched(layer.inverse, F_out)


class InvertibleDecoder(nn.Module):
    """Stack of coupling layers (three by default) with an exact inverse"""

    def __init__(self, channels: int, hidden: int = 64, num_layers: int = 3):
        super().__init__()
        self.channels = channels
        self.num_layers = num_layers
        for i in range(num_layers):
            self.add_module(f"layer{i}", CouplingLayer(channels, hidden))

    @property
    def layers(self) -> list:
        return [getattr(self, f"layer{i}") for i in range(self.num_layers)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def inverse(self, y: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            y = layer.inverse(y)
        return y

    def clip_weights(self, limit: float) -> None:
        for layer in self.layers:
            layer.clip_weights(limit)


def decoder_forward(dec: InvertibleDecoder, F: Tensor) -> Tensor:
    """Composition of the coupling layers"""
    if F.shape[-3] != dec.channels:
        raise ShapeMismatchError(f"decoder expects {dec.channels} channels, got {F.shape[-3]}")
    return _batched(dec.forward, F)


def decoder_inverse(dec: InvertibleDecoder, F: Tensor) -> Tensor:
    """Composition of the layer inverses in reverse order"""
    if F.shape[-3] != dec.channels:
        raise ShapeMismatchError(f"decoder expects {dec.channels} channels, got {F.shape[-3]}")
    return _batched(dec.inverse, F)


@dataclass
class LipschitzEstimate:
    """Empirical forward (K) and inverse (L) Lipschitz constants over sampled pairs"""

    K: float
    L: float
    samples: int


def uniform_sampler(shape: Tuple[int, ...], low: float = -3.0, high: float = 3.0) -> Callable:
    """Sampler drawing uniform points in [low, high]^shape from a generator"""

    def sample(generator: torch.Generator) -> Tensor:
        return low + (high - low) * torch.rand(shape, generator=generator)

    return sample


@torch.no_grad()
def estimate_bilipschitz(
    dec: Union[nn.Module, Callable[[Tensor], Tensor]],
    sampler: Callable[[torch.Generator], Tensor],
    pairs: int,
    seed: int = 0,
) -> LipschitzEstimate:
    """
    Witness the two-sided Lipschitz bound of a mapping on sampled pairs

    K = max ||f(x1) - f(x2)|| / ||x1 - x2||, L = max ||x1 - x2|| / ||f(x1) - f(x2)||.

    Args:
        dec: Mapping under test
        sampler: Draws one point per call from a torch.Generator
        pairs: Number of pairs to draw (>= 2)
        seed: Generator seed

    Returns:
        LipschitzEstimate over the non-degenerate pairs
    """
    if pairs < 2:
        raise ValueError(f"need at least 2 pairs, got {pairs}")
    generator = torch.Generator().manual_seed(seed)

    K, L, used = 0.0, 0.0, 0
    for _ in range(pairs):
        x1, x2 = sampler(generator), sampler(generator)
        d_in = float(torch.linalg.vector_norm(x1 - x2))
        if d_in == 0.0:
            continue
        d_out = float(torch.linalg.vector_norm(dec(x1) - dec(x2)))
        if d_out == 0.0:
            continue
        K = max(K, d_out / d_in)
        L = max(L, d_in / d_out)
        used += 1

    if used == 0:
        raise DegenerateSampleError("all sampled pairs were degenerate")
    logger.info(f"Bi-Lipschitz estimate over {used} pairs: K={K:.4f}, L={L:.4f}")
    return LipschitzEstimate(K=K, L=L, samples=used)
