"""Distance of restored features to proxy ground-truth features across inference steps"""
import math
from dataclasses import dataclass, field
from typing import List, Mapping, Optional

import torch

from src.common.errors import RestoredDepthError
from src.core.tensor import Tensor
from src.depthnet.pipeline import DepthPipeline
from src.diffusion.sampler import LevelPredictor, restore
from src.featopt.optimize import ProxyFeatures


class MissingProxyError(RestoredDepthError):
    """Raised when deviation is measured without proxy features"""
    pass


@dataclass
class DeviationTrace:
    """||F_t - F_proxy||_2 at every visited step, starting at F_T"""

    variant: str
    steps: List[int] = field(default_factory=list)
    distances: List[float] = field(default_factory=list)
    index: int = -1

    def decreasing_fraction(self) -> float:
        """Fraction of consecutive steps where the distance went down; NaN for one entry"""
        pairs = list(zip(self.distances, self.distances[1:]))
        if not pairs:
            return math.nan
        return sum(b < a for a, b in pairs) / len(pairs)


def measure_deviation(
    pipeline: DepthPipeline,
    sample: Mapping[str, Tensor],
    proxy: Optional[ProxyFeatures],
    steps: int,
    seed: int = 0,
    predictor: Optional[LevelPredictor] = None,
) -> DeviationTrace:
    """
    Run restoration on a sample's encoder features and record the distance to the proxy

    Args:
        pipeline: Trained pipeline
        sample: Item with an image
        proxy: Proxy ground-truth features for the same image
        steps: Inference steps
        seed: Seed for the initial noise
        predictor: Replaces the pipeline's restoration networks (e.g. an oracle)

    Returns:
        DeviationTrace with steps + 1 entries
    """
    if proxy is None:
        raise MissingProxyError("deviation needs proxy features; run proxy_gt_feature first")
    image = sample["image"]
    if image.dim() == 3:
        image = image.unsqueeze(0)

    with torch.no_grad():
        feats = pipeline.encode(image)
        trace = restore(
            predictor if predictor is not None else pipeline.diffusion,
            feats.high(),
            pipeline.schedule,
            steps,
            seed=seed,
            condition_mode=pipeline.condition_mode,
            reference=proxy.features,
        )

    index = sample.get("index")
    return DeviationTrace(
        variant=pipeline.decoder_variant,
        steps=list(trace.steps),
        distances=list(trace.deviations or []),
        index=-1 if index is None else int(index),
    )
