"""Depth map export as 16-bit PGM"""
from pathlib import Path
from typing import Union

import numpy as np

from src.core.tensor import Tensor

PGM_SCALE = 256.0
PGM_MAX = 65535


def depth_to_pgm_bytes(depth: Tensor) -> bytes:
    """
    Encode depth in meters as a binary 16-bit PGM, value = round(depth * 256) clamped to 65535

    Args:
        depth: (H, W), (1, H, W) or (1, 1, H, W) depth map
    """
    values = depth.detach().cpu().reshape(depth.shape[-2:]).numpy().astype(np.float64)
    quantized = np.clip(np.rint(values * PGM_SCALE), 0, PGM_MAX).astype(">u2")
    h, w = quantized.shape
    return f"P5\n{w} {h}\n{PGM_MAX}\n".encode("ascii") + quantized.tobytes()


def save_pgm(depth: Tensor, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(depth_to_pgm_bytes(depth))
