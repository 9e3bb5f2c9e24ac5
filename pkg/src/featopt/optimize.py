"""Per-image optimization of frozen-network features"""
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Tuple

import torch

from src.common.logging import get_logger
from src.core.params import ParameterStore
from src.core.tensor import Tensor
from src.depthnet.encoder import EncoderFeatures
from src.depthnet.pipeline import DepthPipeline
from src.metrics.depth import depth_metrics, silog_loss

logger = get_logger(__name__)

Sample = Mapping[str, Tensor]


@dataclass
class FeatOptCurve:
    """RMSE after each optimization step of one feature level; entry 0 is the baseline"""

    level: int
    lr: float
    steps: int
    rmse: List[float] = field(default_factory=list)
    index: int = -1

    @property
    def best(self) -> List[float]:
        """Best-so-far curve, non-increasing"""
        out: List[float] = []
        for value in self.rmse:
            out.append(value if not out else min(out[-1], value))
        return out

    @property
    def reduction(self) -> float:
        """Baseline RMSE minus the best RMSE reached"""
        return self.rmse[0] - self.best[-1]


@dataclass
class ProxyFeatures:
    """Deeply optimized level-3/4 features standing in for the assumed ground-truth feature"""

    features: Dict[int, Tensor]
    baseline_rmse: float
    rmse: float
    curve: List[float] = field(default_factory=list)


@contextmanager
def frozen(pipeline: DepthPipeline) -> Iterator[ParameterStore]:
    """Freeze every pipeline parameter and verify none changed on exit"""
    store = ParameterStore.from_module(pipeline)
    flags = {name: store.is_trainable(name) for name in store}
    store.freeze()
    snapshot = store.snapshot()
    try:
        yield store
        store.assert_frozen_unchanged(snapshot)
    finally:
        for name, flag in flags.items():
            if flag:
                store.unfreeze([name])


def _batch(sample: Sample) -> Tuple[Tensor, Tensor, Tensor]:
    image, depth, mask = sample["image"], sample["depth"], sample["mask"]
    if image.dim() == 3:
        image, depth, mask = image.unsqueeze(0), depth.unsqueeze(0), mask.unsqueeze(0)
    return image, depth, mask


def _sample_index(sample: Sample) -> int:
    index = sample.get("index")
    return -1 if index is None else int(index)


def _decode(pipeline: DepthPipeline, feats: EncoderFeatures) -> Tensor:
    return pipeline.decode_depth(feats.f3, feats.f4, feats.f1, feats.f2).values


def _rmse(pred: Tensor, depth: Tensor, mask: Tensor) -> float:
    return depth_metrics(pred, depth, mask).rmse


def optimize_features(
    pipeline: DepthPipeline,
    sample: Sample,
    level: int,
    steps: int,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
) -> FeatOptCurve:
    """
    Optimize one encoder level's feature on a single image, all other levels held fixed

    Args:
        pipeline: Trained pipeline; its parameters must not change
        sample: Item with image, depth and mask
        level: Feature level 1..4
        steps: Adam steps on the masked SiLog loss
        lr: Adam learning rate
        betas: Adam betas

    Returns:
        FeatOptCurve with steps + 1 RMSE values
    """
    if level not in (1, 2, 3, 4):
        raise ValueError(f"feature level must be 1..4, got {level}")
    image, depth, mask = _batch(sample)
    curve = FeatOptCurve(level=level, lr=lr, steps=steps, index=_sample_index(sample))

    with frozen(pipeline):
        with torch.no_grad():
            feats = pipeline.encode(image).detach()
            curve.rmse.append(_rmse(_decode(pipeline, feats), depth, mask))

        variable = feats.level(level).clone().requires_grad_(True)
        optimizer = torch.optim.Adam([variable], lr=lr, betas=betas)
        for _ in range(steps):
            optimizer.zero_grad()
            pred = _decode(pipeline, feats.replace(level, variable))
            silog_loss(pred, depth, mask).backward()
            optimizer.step()
            with torch.no_grad():
                curve.rmse.append(_rmse(_decode(pipeline, feats.replace(level, variable)), depth, mask))

    logger.debug(
        f"Level {level} feature optimization: {curve.rmse[0]:.4f} -> {curve.best[-1]:.4f}",
        extra={"level": level, "steps": steps, "index": curve.index},
    )
    return curve


def proxy_gt_feature(
    pipeline: DepthPipeline,
    sample: Sample,
    steps: int = 500,
    lr: float = 1e-2,
    betas: Tuple[float, float] = (0.9, 0.999),
) -> ProxyFeatures:
    """
    Jointly optimize f3 and f4 on one image and keep the best pair seen

    Returns:
        ProxyFeatures whose rmse is the minimum of its curve
    """
    image, depth, mask = _batch(sample)
    with frozen(pipeline):
        with torch.no_grad():
            feats = pipeline.encode(image).detach()
            baseline = _rmse(_decode(pipeline, feats), depth, mask)

        f3 = feats.f3.clone().requires_grad_(True)
        f4 = feats.f4.clone().requires_grad_(True)
        optimizer = torch.optim.Adam([f3, f4], lr=lr, betas=betas)
        best = (baseline, feats.f3.clone(), feats.f4.clone())
        curve = [baseline]

        for _ in range(steps):
            optimizer.zero_grad()
            current = EncoderFeatures(feats.f1, feats.f2, f3, f4)
            silog_loss(_decode(pipeline, current), depth, mask).backward()
            optimizer.step()
            with torch.no_grad():
                value = _rmse(_decode(pipeline, EncoderFeatures(feats.f1, feats.f2, f3, f4)), depth, mask)
            if math.isfinite(value) and value < best[0]:
                best = (value, f3.detach().clone(), f4.detach().clone())
            curve.append(min(curve[-1], value))

    logger.debug(f"Proxy features: RMSE {baseline:.4f} -> {best[0]:.4f} over {steps} steps")
    return ProxyFeatures(
        features={3: best[1], 4: best[2]}, baseline_rmse=baseline, rmse=best[0], curve=curve
    )
