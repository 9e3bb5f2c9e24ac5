"""Dataset generation to disk, manifests and torch datasets over the splits"""
import json
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch
from torch.utils.data import Dataset

from src.common.config import ConfigError, DataConfig
from src.common.logging import get_logger
from src.core.persistence import load_tensor, save_tensor
from src.synthdata.scenes import DepthSample, SceneSpec, gen_aux_view, gen_scene, sparsify

logger = get_logger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"


def split_indices(data: DataConfig) -> Dict[str, range]:
    """Disjoint index ranges: train first, then val, then test"""
    train_end = data.train_size
    val_end = train_end + data.val_size
    return {
        "train": range(0, train_end),
        "val": range(train_end, val_end),
        "test": range(val_end, val_end + data.test_size),
    }


def make_sample(spec: SceneSpec, index: int, keep_rate: float, bf: float) -> DepthSample:
    """Sparse sample with an auxiliary view; a pure function of (spec, index)"""
    sample = gen_scene(spec, index)
    sample = sparsify(sample, keep_rate, spec.seed)
    return gen_aux_view(sample, bf)


def sample_to_item(sample: DepthSample) -> Dict[str, torch.Tensor]:
    item = {
        "index": torch.tensor(sample.index),
        "image": sample.image,
        "depth": sample.depth,
        "mask": sample.mask,
    }
    if sample.aux_image is not None:
        item["aux_image"] = sample.aux_image
    return item


def generate_dataset(data: DataConfig, out_dir: Union[str, Path]) -> Path:
    """
    Generate every split as tensor files and write the manifest

    Args:
        data: Dataset config (scene parameters, split sizes, keep_rate, bf)
        out_dir: Dataset directory

    Returns:
        Path to manifest.json
    """
    out_dir = Path(out_dir)
    spec = SceneSpec.from_config(data)
    manifest: Dict[str, object] = {
        "spec": spec.to_dict(),
        "keep_rate": data.keep_rate,
        "bf": data.bf,
        "splits": {},
    }

    for split, indices in split_indices(data).items():
        entries: List[Dict[str, object]] = []
        for index in indices:
            sample = make_sample(spec, index, data.keep_rate, data.bf)
            stem = f"{split}/{index:06d}"
            entry: Dict[str, object] = {"index": index}
            for key, tensor in (
                ("image", sample.image),
                ("depth", sample.depth),
                ("mask", sample.mask),
                ("aux", sample.aux_image),
            ):
                relative = f"{stem}_{key}.tnsr"
                save_tensor(tensor, out_dir / relative)
                entry[key] = relative
            entries.append(entry)
        manifest["splits"][split] = entries  # type: ignore[index]
        logger.info(f"Generated {len(entries)} {split} samples", extra={"split": split})

    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


class DepthDataset(Dataset):
    """
    One split, either read from a generated dataset directory or generated on demand

    Items are dicts with index, image, depth, mask and aux_image tensors.
    """

    def __init__(
        self,
        split: str,
        indices: Optional[List[int]] = None,
        spec: Optional[SceneSpec] = None,
        keep_rate: float = 0.15,
        bf: float = 64.0,
        root: Optional[Path] = None,
        entries: Optional[List[Dict[str, object]]] = None,
    ):
        if split not in SPLITS:
            raise ValueError(f"unknown split '{split}'")
        self.split = split
        self.spec = spec
        self.keep_rate = keep_rate
        self.bf = bf
        self.root = root
        self.entries = entries
        self.indices = indices if indices is not None else [int(e["index"]) for e in entries or []]

    @classmethod
    def from_manifest(cls, root: Union[str, Path], split: str) -> "DepthDataset":
        root = Path(root)
        manifest = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
        return cls(
            split,
            spec=SceneSpec(**{**manifest["spec"], "object_count": tuple(manifest["spec"]["object_count"])}),
            keep_rate=manifest["keep_rate"],
            bf=manifest["bf"],
            root=root,
            entries=manifest["splits"][split],
        )

    @classmethod
    def in_memory(cls, data: DataConfig, split: str) -> "DepthDataset":
        return cls(
            split,
            indices=list(split_indices(data)[split]),
            spec=SceneSpec.from_config(data),
            keep_rate=data.keep_rate,
            bf=data.bf,
        )

    def __len__(self) -> int:
        return len(self.indices)

    def sample(self, position: int) -> DepthSample:
        if self.entries is not None and self.root is not None:
            entry = self.entries[position]
            return DepthSample(
                index=int(entry["index"]),
                image=load_tensor(self.root / str(entry["image"])),
                depth=load_tensor(self.root / str(entry["depth"])),
                mask=load_tensor(self.root / str(entry["mask"])),
                aux_image=load_tensor(self.root / str(entry["aux"])),
            )
        if self.spec is None:
            raise ConfigError(
                "data", f"'{self.split}' split has neither a manifest entry list nor a scene spec"
            )
        return make_sample(self.spec, self.indices[position], self.keep_rate, self.bf)

    def __getitem__(self, position: int) -> Dict[str, torch.Tensor]:
        return sample_to_item(self.sample(position))


def load_split(data: DataConfig, split: str) -> DepthDataset:
    """Dataset for a split: from data.path when it holds a manifest, else generated in memory"""
    if data.path is not None and (Path(data.path) / MANIFEST_NAME).exists():
        return DepthDataset.from_manifest(data.path, split)
    if data.path is not None:
        logger.warning(f"No manifest under {data.path}; generating the {split} split in memory")
    return DepthDataset.in_memory(data, split)
