"""Mutual condition maps between the two high-level feature scales"""
from dataclasses import dataclass

from src.common.errors import ShapeMismatchError
from src.core.tensor import Tensor, pixel_shuffle, space_to_depth

RESTORED_LEVELS = (3, 4)


@dataclass
class ConditionMaps:
    """Condition for one target level: the other level's noisy feature at the target scale"""

    level: int
    C_mul: Tensor


def build_conditions(noisy_f3: Tensor, noisy_f4: Tensor, level: int, r: int = 2) -> ConditionMaps:
    """
    Build the condition map for one restored level from the same noised features

    Level 3 is conditioned on pixel_shuffle(level-4 feature); level 4 on
    space_to_depth(level-3 feature).

    Args:
        noisy_f3: Noisy level-3 feature (..., C3, H, W)
        noisy_f4: Noisy level-4 feature (..., C4, H/r, W/r)
        level: Target level, 3 or 4
        r: Scale ratio between the levels (1 keeps the other feature unchanged)

    Returns:
        ConditionMaps whose spatial dims equal the target feature's
    """
    if level not in RESTORED_LEVELS:
        raise ShapeMismatchError(f"conditions exist only for levels {RESTORED_LEVELS}, got {level}")

    h3, w3 = noisy_f3.shape[-2:]
    h4, w4 = noisy_f4.shape[-2:]
    if h3 != r * h4 or w3 != r * w4:
        raise ShapeMismatchError(
            f"level-3 dims {h3}x{w3} are not {r}x level-4 dims {h4}x{w4}"
        )

    if level == 3:
        return ConditionMaps(level=3, C_mul=pixel_shuffle(noisy_f4, r))
    return ConditionMaps(level=4, C_mul=space_to_depth(noisy_f3, r))


def condition_channels(feature_channels: int, other_channels: int, level: int, r: int = 2) -> int:
    """Channel count of the condition map for a level"""
    if level == 3:
        return other_channels // (r * r)
    return other_channels * r * r
