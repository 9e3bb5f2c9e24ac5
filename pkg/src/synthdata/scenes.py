"""Scene generation, LiDAR-like sparsification and auxiliary-view warping"""
import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from src.common.config import DataConfig
from src.core.tensor import Tensor

# depth at which shading falls to one half
SHADING_REFERENCE = 10.0
GROUND_ALBEDO = (0.45, 0.5, 0.4)


class ObjectShape(str, Enum):
    RECTANGLE = "rectangle"
    ELLIPSE = "ellipse"


@dataclass(frozen=True)
class SceneObject:
    """Fronto-parallel object at a single depth; positions in pixels"""

    shape: ObjectShape
    center: Tuple[float, float]
    half_size: Tuple[float, float]
    depth: float
    albedo: Tuple[float, float, float]

    def coverage(self, height: int, width: int) -> np.ndarray:
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        cy, cx = self.center
        hy, hx = self.half_size
        if self.shape == ObjectShape.RECTANGLE:
            return (np.abs(ys - cy) <= hy) & (np.abs(xs - cx) <= hx)
        return ((ys - cy) / hy) ** 2 + ((xs - cx) / hx) ** 2 <= 1.0


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the scene generator; (seed, index) determines every sample"""

    seed: int = 0
    image_size: int = 128
    object_count: Tuple[int, int] = (0, 6)
    depth_min: float = 0.5
    depth_max: float = 80.0
    plane_near: float = 2.0
    plane_far: float = 80.0
    texture_noise: float = 0.05

    def __post_init__(self) -> None:
        if not self.depth_min <= self.plane_near < self.plane_far <= self.depth_max:
            raise ValueError("ground plane depths must lie inside the depth range")
        if self.object_count[0] < 0 or self.object_count[1] < self.object_count[0]:
            raise ValueError("object_count must be an increasing non-negative pair")

    @classmethod
    def from_config(cls, data: DataConfig) -> "SceneSpec":
        return cls(
            seed=data.seed,
            image_size=data.image_size,
            object_count=tuple(data.object_count),
            depth_min=data.depth_min,
            depth_max=data.depth_max,
            plane_near=max(data.depth_min, 2.0),
            plane_far=data.depth_max,
            texture_noise=data.texture_noise,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DepthSample:
    """
    One synthetic sample

    image: (3, H, W) in [0, 1]; depth: (1, H, W) meters; mask: (1, H, W) in {0, 1};
    aux_image: (3, H, W) horizontally displaced view, when generated
    """

    index: int
    image: Tensor
    depth: Tensor
    mask: Tensor
    aux_image: Optional[Tensor] = None


def ground_plane(spec: SceneSpec, height: int, width: int) -> np.ndarray:
    """Plane depth with inverse depth linear in the row: far at the top row, near at the bottom"""
    rows = np.linspace(0.0, 1.0, height)
    inverse = 1.0 / spec.plane_far + rows * (1.0 / spec.plane_near - 1.0 / spec.plane_far)
    return np.repeat((1.0 / inverse)[:, None], width, axis=1)


def random_objects(spec: SceneSpec, rng: np.random.Generator) -> List[SceneObject]:
    size = spec.image_size
    low, high = spec.object_count
    count = int(rng.integers(low, high + 1))
    near = max(spec.depth_min, spec.plane_near)
    objects = []
    for _ in range(count):
        objects.append(
            SceneObject(
                shape=ObjectShape.RECTANGLE if rng.random() < 0.5 else ObjectShape.ELLIPSE,
                center=(float(rng.uniform(0, size)), float(rng.uniform(0, size))),
                half_size=(float(rng.uniform(0.05, 0.25) * size), float(rng.uniform(0.05, 0.25) * size)),
                depth=float(np.exp(rng.uniform(np.log(near), np.log(0.9 * spec.depth_max)))),
                albedo=tuple(float(v) for v in rng.uniform(0.2, 1.0, size=3)),
            )
        )
    return objects


def render_scene(
    spec: SceneSpec,
    index: int,
    objects: Sequence[SceneObject],
    rng: Optional[np.random.Generator] = None,
) -> DepthSample:
    """
    Composite objects over the ground plane; nearer surfaces occlude farther ones

    Args:
        spec: Scene parameters
        index: Sample index (kept on the sample)
        objects: Objects to draw
        rng: Source of texture noise (no noise when None)

    Returns:
        Dense DepthSample with an all-ones mask
    """
    size = spec.image_size
    depth = ground_plane(spec, size, size)
    albedo = np.empty((3, size, size))
    albedo[:] = np.asarray(GROUND_ALBEDO)[:, None, None]

    for obj in objects:
        closer = obj.coverage(size, size) & (obj.depth < depth)
        depth[closer] = obj.depth
        albedo[:, closer] = np.asarray(obj.albedo)[:, None]

    depth = np.clip(depth, spec.depth_min, spec.depth_max)
    image = albedo * (SHADING_REFERENCE / (SHADING_REFERENCE + depth))[None]
    if rng is not None and spec.texture_noise > 0:
        image = image + spec.texture_noise * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)

    return DepthSample(
        index=index,
        image=torch.from_numpy(image.astype(np.float32)),
        depth=torch.from_numpy(depth.astype(np.float32)[None]),
        mask=torch.ones(1, size, size),
    )


def gen_scene(spec: SceneSpec, index: int) -> DepthSample:
    """Dense sample for (spec.seed, index)"""
    rng = np.random.default_rng([spec.seed, index])
    objects = random_objects(spec, rng)
    return render_scene(spec, index, objects, rng)


def sparsify(sample: DepthSample, keep_rate: float, seed: int) -> DepthSample:
    """Keep each pixel independently with probability keep_rate; depth values untouched"""
    if not 0.0 <= keep_rate <= 1.0:
        raise ValueError(f"keep_rate must lie in [0, 1], got {keep_rate}")
    rng = np.random.default_rng([seed, sample.index, 1])
    keep = rng.random(tuple(sample.depth.shape)) < keep_rate
    mask = torch.from_numpy(keep.astype(np.float32)) * (sample.depth > 0).float()
    return dataclasses.replace(sample, mask=mask)


def _fill_holes(valid: np.ndarray) -> np.ndarray:
    """Per row, source column of each pixel: itself if valid, else nearest valid left, else right"""
    height, width = valid.shape
    cols = np.broadcast_to(np.arange(width), (height, width))
    left = np.maximum.accumulate(np.where(valid, cols, -1), axis=1)
    right = np.minimum.accumulate(np.where(valid, cols, width)[:, ::-1], axis=1)[:, ::-1]
    source = np.where(left >= 0, left, right)
    return np.clip(source, 0, width - 1)


def gen_aux_view(sample: DepthSample, bf: float) -> DepthSample:
    """
    Forward-warp the image into a right-hand view with disparity bf / depth

    Pixel x lands on x - round(bf / depth); nearer pixels win collisions and
    holes take the nearest valid left neighbor.

    Args:
        sample: Sample with dense depth
        bf: Baseline x focal length product in px*m

    Returns:
        Copy of the sample with aux_image set
    """
    image = sample.image.numpy()
    depth = sample.depth[0].numpy().astype(np.float64)
    height, width = depth.shape

    disparity = np.floor(bf / depth + 0.5).astype(np.int64)
    ys, xs = np.mgrid[0:height, 0:width]
    targets = xs - disparity
    inside = (targets >= 0) & (targets < width)

    zbuffer = np.full((height, width), np.inf)
    np.minimum.at(zbuffer, (ys[inside], targets[inside]), depth[inside])
    winners = inside.copy()
    winners[inside] = depth[inside] <= zbuffer[ys[inside], targets[inside]]

    warped = np.zeros_like(image)
    warped[:, ys[winners], targets[winners]] = image[:, ys[winners], xs[winners]]
    valid = np.isfinite(zbuffer)

    source = _fill_holes(valid)
    rows = np.arange(height)[:, None]
    aux = warped[:, rows, source]
    return dataclasses.replace(sample, aux_image=torch.from_numpy(aux.astype(np.float32)))
