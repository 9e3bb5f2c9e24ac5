"""Full depth pipeline: encoder, feature restoration, decoder block, tail and bins head"""
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from src.avlfe.module import AVLFEMode, LowLevelEnhancer
from src.common.config import ExperimentConfig, ModelConfig
from src.common.errors import ShapeMismatchError
from src.common.logging import get_logger
from src.core.tensor import Tensor, pixel_shuffle
from src.decoder.invertible import InvertibleDecoder
from src.decoder.variants import MODULE_NAMES, build_decoder_block, count_parameters
from src.depthnet.bins import BinsHead, BinsPrediction, DepthMap, bins_to_depth, upsample_depth
from src.depthnet.encoder import Encoder, EncoderFeatures, upsample
from src.diffusion.conditions import RESTORED_LEVELS
from src.diffusion.restoration import FeatureRestorer
from src.diffusion.sampler import (
    Features,
    RestorationTrace,
    noisy_conditions,
    one_step_estimate,
    restore,
)
from src.diffusion.schedule import NoiseSchedule, Step, build_schedule, forward_noise

logger = get_logger(__name__)

AuxFeatures = Optional[Tuple[Tensor, Tensor]]


class DecoderTail(nn.Module):
    """Upsample-and-fuse path from the merged 1/16 feature through skips f2 and f1 to 1/4"""

    def __init__(self, in_channels: int, level2_channels: int, level1_channels: int, width: int):
        super().__init__()
        self.reduce = nn.Conv2d(in_channels, width, 3, padding=1)
        self.fuse2 = nn.Conv2d(width + level2_channels, width, 3, padding=1)
        self.fuse1 = nn.Conv2d(width + level1_channels, width, 3, padding=1)

    def forward(self, x: Tensor, f2: Tensor, f1: Tensor) -> Tensor:
        h = F.gelu(self.reduce(x))
        h = F.gelu(self.fuse2(torch.cat([upsample(h, 2), f2], dim=1)))
        return F.gelu(self.fuse1(torch.cat([upsample(h, 2), f1], dim=1)))


class DepthPipeline(nn.Module):
    """
    Depth estimation as feature restoration

    Parameter names are prefixed by component: encoder, the decoder block
    (invdec, convdec or tfdec), tail, bins, diffusion and avlfe. The AV-LFE
    module is registered last so its initialization does not shift the
    random draws of the other components.
    """

    def __init__(
        self,
        model: ModelConfig,
        schedule: NoiseSchedule,
        condition_mode: str = "rebuilt",
        avlfe_points: Optional[int] = 9,
    ):
        super().__init__()
        c1, c2, c3, c4 = model.encoder_channels
        self.model_config = model
        self.schedule = schedule
        self.condition_mode = condition_mode
        self.decoder_variant = model.decoder
        self.block_name = MODULE_NAMES[model.decoder]

        self.encoder = Encoder(model.encoder_channels)
        self.add_module(
            self.block_name,
            build_decoder_block(model.decoder, model.restored_channels, model.coupling_hidden),
        )
        self.tail = DecoderTail(model.restored_channels, c2, c1, model.tail_width)
        self.bins = BinsHead(model.tail_width, c4, model.bins, model.depth_min, model.depth_max)
        self.diffusion = FeatureRestorer(
            c3,
            c4,
            schedule.T,
            width=model.trunk_width,
            blocks=model.residual_blocks,
            time_embed_dim=model.time_embed_dim,
        )
        self.avlfe: Optional[LowLevelEnhancer] = None
        if avlfe_points is not None:
            self.avlfe = LowLevelEnhancer(c1, c2, avlfe_points)

    @property
    def block(self) -> nn.Module:
        return getattr(self, self.block_name)

    @property
    def d_min(self) -> float:
        return self.model_config.depth_min

    @property
    def d_max(self) -> float:
        return self.model_config.depth_max

    def set_avlfe_mode(self, mode: AVLFEMode) -> None:
        if self.avlfe is None:
            if AVLFEMode(mode) != AVLFEMode.OFF:
                raise ValueError("pipeline was built without an AV-LFE module")
            return
        self.avlfe.set_mode(mode)

    def encode(self, image: Tensor) -> EncoderFeatures:
        return self.encoder(image)

    def merge(self, f3: Tensor, f4: Tensor) -> Tensor:
        """Concatenate f3' with the pixel-shuffled f4' at 1/16 resolution"""
        up = pixel_shuffle(f4, 2)
        if up.shape[-2:] != f3.shape[-2:]:
            raise ShapeMismatchError(
                f"pixel-shuffled f4 {tuple(up.shape)} does not align with f3 {tuple(f3.shape)}"
            )
        return torch.cat([f3, up], dim=1)

    def decode_bins(self, f3: Tensor, f4: Tensor, f1: Tensor, f2: Tensor) -> BinsPrediction:
        x = self.block(self.merge(f3, f4))
        if f2.shape[-2:] != tuple(2 * s for s in x.shape[-2:]):
            raise ShapeMismatchError(f"skip f2 {tuple(f2.shape)} does not match 2x {tuple(x.shape)}")
        if f1.shape[-2:] != tuple(2 * s for s in f2.shape[-2:]):
            raise ShapeMismatchError(f"skip f1 {tuple(f1.shape)} does not match 2x {tuple(f2.shape)}")
        return self.bins(self.tail(x, f2, f1), f4)

    def decode_depth(self, f3: Tensor, f4: Tensor, f1: Tensor, f2: Tensor) -> DepthMap:
        """
        Decode (restored) high-level features and low-level skips into full-resolution depth

        Args:
            f3: Level-3 feature (N, C3, H/16, W/16)
            f4: Level-4 feature (N, C4, H/32, W/32)
            f1: Level-1 skip (N, C1, H/4, W/4), raw or AV-LFE-enhanced
            f2: Level-2 skip (N, C2, H/8, W/8), raw or AV-LFE-enhanced

        Returns:
            DepthMap (N, 1, H, W)
        """
        coarse = bins_to_depth(self.decode_bins(f3, f4, f1, f2), self.d_min, self.d_max)
        return upsample_depth(coarse, 4)

    def skips(self, feats: EncoderFeatures, aux_image: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Low-level shortcut features, replaced by AV-LFE outputs when an auxiliary view is given"""
        if self.avlfe is None or aux_image is None or self.avlfe.mode == AVLFEMode.OFF:
            return feats.f1, feats.f2
        aux: AuxFeatures = self.encoder.low_level(aux_image)
        return self.avlfe(feats.f1, feats.f2, aux)

    def baseline_forward(self, image: Tensor, aux_image: Optional[Tensor] = None) -> DepthMap:
        """Depth from unrestored features (no diffusion)"""
        feats = self.encode(image)
        f1, f2 = self.skips(feats, aux_image)
        return self.decode_depth(feats.f3, feats.f4, f1, f2)

    def one_step_restore(self, high: Features, t: Step, noise: Features) -> Features:
        """Noise the high-level features to step t and return the one-step F0 estimates"""
        noisy = {
            level: forward_noise(high[level], t, self.schedule, noise[level])
            for level in RESTORED_LEVELS
        }
        conds = noisy_conditions(noisy)
        return {
            level: one_step_estimate(
                noisy[level],
                t,
                self.diffusion.predict_level(level, noisy[level], t, conds[level]),
                self.schedule,
            )
            for level in RESTORED_LEVELS
        }

    def restore_features(
        self,
        feats: EncoderFeatures,
        steps: Optional[int] = None,
        seed: int = 0,
        reference: Optional[Features] = None,
    ) -> RestorationTrace:
        steps = self.schedule.T if steps is None else steps
        return restore(
            self.diffusion,
            feats.high(),
            self.schedule,
            steps,
            seed=seed,
            condition_mode=self.condition_mode,
            reference=reference,
        )

    def infer(
        self,
        image: Tensor,
        aux_image: Optional[Tensor] = None,
        steps: Optional[int] = None,
        seed: int = 0,
    ) -> Tuple[DepthMap, Optional[RestorationTrace]]:
        """
        Full inference: restore f3/f4 over the visited steps and decode

        steps=0 skips restoration and decodes the encoder features directly.
        """
        feats = self.encode(image)
        f1, f2 = self.skips(feats, aux_image)
        if steps == 0:
            return self.decode_depth(feats.f3, feats.f4, f1, f2), None
        trace = self.restore_features(feats, steps, seed)
        restored = trace.final
        return self.decode_depth(restored[3], restored[4], f1, f2), trace

    def forward(
        self,
        image: Tensor,
        aux_image: Optional[Tensor] = None,
        steps: Optional[int] = None,
        seed: int = 0,
    ) -> DepthMap:
        depth, _ = self.infer(image, aux_image, steps, seed)
        return depth

    def stage_prefixes(self, stage: str, avlfe_mode: AVLFEMode = AVLFEMode.COMPATIBLE) -> List[str]:
        """Parameter-name prefixes trained in a stage"""
        if stage == "pretrain":
            return ["encoder", self.block_name, "tail", "bins"]
        if stage == "diffusion":
            return ["diffusion", self.block_name]
        if stage == "avlfe":
            return [""] if AVLFEMode(avlfe_mode) == AVLFEMode.FULL else ["avlfe"]
        raise ValueError(f"unknown stage '{stage}'")

    def clip_weights(self, limit: Optional[float]) -> None:
        if limit is not None and isinstance(self.block, InvertibleDecoder):
            self.block.clip_weights(limit)

    def parameter_counts(self) -> Dict[str, int]:
        """Scalar parameter count per component"""
        components = ["encoder", self.block_name, "tail", "bins", "diffusion"]
        if self.avlfe is not None:
            components.append("avlfe")
        return {name: count_parameters(getattr(self, name)) for name in components}


def build_pipeline(config: ExperimentConfig, with_avlfe: bool = True) -> DepthPipeline:
    """
    Build a freshly initialized pipeline; initialization is seeded by config.seed

    Args:
        config: Experiment config
        with_avlfe: Register the AV-LFE module

    Returns:
        DepthPipeline with AV-LFE mode set from the config
    """
    torch.manual_seed(config.seed)
    schedule = build_schedule(
        config.schedule.T, config.schedule.kind, literal_eq9=config.schedule.literal_eq9
    )
    pipeline = DepthPipeline(
        config.model,
        schedule,
        condition_mode=config.diffusion.condition_mode,
        avlfe_points=config.avlfe.points if with_avlfe else None,
    )
    if with_avlfe:
        pipeline.set_avlfe_mode(AVLFEMode(config.avlfe.mode))
    logger.info(
        f"Built pipeline with decoder '{config.model.decoder}' and T={schedule.T}",
        extra={"parameters": pipeline.parameter_counts()},
    )
    return pipeline


def baseline_forward(pipeline: DepthPipeline, image: Tensor) -> DepthMap:
    return pipeline.baseline_forward(image)


def decode_depth(pipeline: DepthPipeline, f3: Tensor, f4: Tensor, f1: Tensor, f2: Tensor) -> DepthMap:
    return pipeline.decode_depth(f3, f4, f1, f2)
