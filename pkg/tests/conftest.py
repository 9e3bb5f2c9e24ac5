"""Test configuration and fixtures"""
import pytest
import torch

from src.common.config import ExperimentConfig, build_experiment_config
from src.depthnet.pipeline import DepthPipeline, build_pipeline
from src.storage.runs import RunRepository
from src.synthdata.dataset import make_sample, sample_to_item
from src.synthdata.scenes import SceneSpec


def tiny_raw_config() -> dict:
    """Smallest config that keeps every scale relation of the full model"""
    return {
        "seed": 0,
        "data": {
            "image_size": 32,
            "object_count": [0, 2],
            "train_size": 4,
            "val_size": 2,
            "test_size": 2,
            "keep_rate": 0.5,
        },
        "schedule": {"T": 3},
        "model": {
            "encoder_channels": [4, 8, 16, 32],
            "bins": 8,
            "coupling_hidden": 8,
            "tail_width": 8,
            "trunk_width": 16,
            "time_embed_dim": 8,
            "residual_blocks": 1,
        },
        "diffusion": {"steps": 3},
        "optim": {
            "epochs_pretrain": 1,
            "epochs_diffusion": 1,
            "epochs_avlfe": 1,
            "batch_size": 2,
        },
        "featopt": {"steps": 3, "proxy_steps": 3, "levels": [1, 4], "max_images": 1},
        "eval": {"seeds": [0], "max_images": 2},
    }


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """Tiny experiment config writing into a temporary run directory"""
    return build_experiment_config(tiny_raw_config(), {"output_dir": str(tmp_path / "run")})


@pytest.fixture
def tiny_pipeline(tiny_config) -> DepthPipeline:
    """Freshly initialized tiny pipeline in eval mode"""
    pipeline = build_pipeline(tiny_config)
    pipeline.eval()
    return pipeline


@pytest.fixture
def tiny_item(tiny_config) -> dict:
    """One sparse sample with an auxiliary view, as a dataset item"""
    spec = SceneSpec.from_config(tiny_config.data)
    return sample_to_item(make_sample(spec, 0, 0.5, tiny_config.data.bf))


@pytest.fixture
def runs(tiny_config) -> RunRepository:
    return RunRepository(tiny_config.output_dir)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
