"""SiLog loss, standard depth metrics and range-bucketed evaluation"""
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple, Union

import torch

from src.common.errors import RestoredDepthError
from src.core.tensor import Tensor, check_same_shape
from src.depthnet.bins import DepthMap

SILOG_LAMBDA = 0.85
SILOG_SCALE = 10.0
DEFAULT_BUCKETS: Tuple[Tuple[float, float], ...] = ((0.0, 20.0), (20.0, 50.0), (50.0, 80.0))

DepthLike = Union[DepthMap, Tensor]
METRIC_NAMES = ("rmse", "abs_rel", "sq_rel", "rmse_log", "delta1", "delta2", "delta3")


class EmptyMaskError(RestoredDepthError):
    """Raised when no pixel is selected by the mask"""
    pass


class InvalidDepthError(RestoredDepthError):
    """Raised when a masked pixel holds a non-positive depth"""
    pass


class BucketError(RestoredDepthError):
    """Raised for malformed or overlapping depth buckets"""
    pass


def _values(x: DepthLike) -> Tensor:
    return x.values if isinstance(x, DepthMap) else x


def masked_pairs(pred: DepthLike, gt: DepthLike, mask: Tensor) -> Tuple[Tensor, Tensor]:
    """Flat (pred, gt) values on masked pixels, validated positive"""
    p, g = _values(pred), _values(gt)
    check_same_shape(p, g, "prediction and ground truth")
    if mask.numel() != g.numel():
        raise RestoredDepthError(f"mask has {mask.numel()} entries, depth has {g.numel()}")
    keep = mask.reshape(-1) > 0.5
    if not bool(keep.any()):
        raise EmptyMaskError("mask selects no pixels")
    p, g = p.reshape(-1)[keep], g.reshape(-1)[keep]
    if bool((p <= 0).any()) or bool((g <= 0).any()):
        raise InvalidDepthError("depth must be positive on masked pixels")
    return p, g


def silog_loss(pred: DepthLike, gt: DepthLike, mask: Tensor, lam: float = SILOG_LAMBDA) -> Tensor:
    """
    Scale-invariant log loss: 10 * sqrt(mean(d^2) - lam * mean(d)^2), d = ln pred - ln gt

    Args:
        pred: Predicted depth
        gt: Ground-truth depth
        mask: Valid-pixel mask shaped like gt
        lam: Variance weight

    Returns:
        Scalar tensor, differentiable w.r.t. pred
    """
    p, g = masked_pairs(pred, gt, mask)
    d = torch.log(p) - torch.log(g)
    variance = (d**2).mean() - lam * d.mean() ** 2
    return SILOG_SCALE * torch.sqrt(variance.clamp_min(0.0))


@dataclass
class MetricsReport:
    """Standard depth metrics over a set of pixels; NaN everywhere when count is 0"""

    rmse: float
    abs_rel: float
    sq_rel: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    count: int

    @classmethod
    def empty(cls) -> "MetricsReport":
        return cls(*([math.nan] * len(METRIC_NAMES)), count=0)

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def depth_metrics(pred: DepthLike, gt: DepthLike, mask: Tensor) -> MetricsReport:
    """
    RMSE, AbsRel, SqRel, RMSElog and delta thresholds over masked pixels

    Computed in float64.
    """
    p, g = masked_pairs(pred, gt, mask)
    p, g = p.detach().double(), g.detach().double()
    diff = p - g
    ratio = torch.maximum(p / g, g / p)
    return MetricsReport(
        rmse=float(torch.sqrt((diff**2).mean())),
        abs_rel=float((diff.abs() / g).mean()),
        sq_rel=float((diff**2 / g).mean()),
        rmse_log=float(torch.sqrt(((torch.log(p) - torch.log(g)) ** 2).mean())),
        delta1=float((ratio < 1.25).double().mean()),
        delta2=float((ratio < 1.25**2).double().mean()),
        delta3=float((ratio < 1.25**3).double().mean()),
        count=int(p.numel()),
    )


def validate_buckets(buckets: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Buckets sorted by lower bound; raises BucketError on empty or overlapping intervals"""
    ordered = sorted((float(lo), float(hi)) for lo, hi in buckets)
    if not ordered:
        raise BucketError("at least one bucket is required")
    for lo, hi in ordered:
        if lo < 0 or hi <= lo:
            raise BucketError(f"bucket [{lo}, {hi}) is empty or negative")
    for (_, prev_hi), (lo, _) in zip(ordered, ordered[1:]):
        if lo < prev_hi:
            raise BucketError(f"bucket starting at {lo} overlaps one ending at {prev_hi}")
    return ordered


def range_metrics(
    pred: DepthLike,
    gt: DepthLike,
    mask: Tensor,
    buckets: Sequence[Tuple[float, float]] = DEFAULT_BUCKETS,
) -> List[MetricsReport]:
    """
    Metrics restricted to masked pixels whose ground truth falls in each bucket

    Buckets are half-open [lo, hi) except the last, which includes its upper
    bound. Empty buckets yield MetricsReport.empty().
    """
    ordered = validate_buckets(buckets)
    g = _values(gt)
    base = mask.reshape(g.shape) > 0.5
    reports = []
    for i, (lo, hi) in enumerate(ordered):
        upper = g <= hi if i == len(ordered) - 1 else g < hi
        selected = base & (g >= lo) & upper
        if not bool(selected.any()):
            reports.append(MetricsReport.empty())
            continue
        reports.append(depth_metrics(pred, gt, selected.float()))
    return reports
