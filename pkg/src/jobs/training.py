"""Training jobs - staged training of the depth pipeline"""
from typing import Any, Callable, Dict, List, Optional

import torch
from torch.utils.data import DataLoader, Dataset

from src.avlfe.module import AVLFEMode
from src.common.config import ExperimentConfig
from src.common.logging import get_logger
from src.core.params import ParameterStore
from src.core.persistence import apply_checkpoint, save_checkpoint
from src.core.tensor import Tensor
from src.depthnet.pipeline import DepthPipeline, build_pipeline
from src.diffusion.sampler import sample_noise
from src.exporter.metrics import RunMetrics
from src.metrics.depth import silog_loss
from src.storage.runs import RunRepository
from src.synthdata.dataset import load_split

logger = get_logger(__name__)

Batch = Dict[str, Tensor]
LossFn = Callable[[DepthPipeline, Batch, torch.Generator], Tensor]


def make_loader(dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True) -> DataLoader:
    """Single-process loader whose shuffling order is fixed by the seed"""
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator)


def baseline_loss(pipeline: DepthPipeline, batch: Batch, generator: torch.Generator) -> Tensor:
    """SiLog of the depth decoded from unrestored features"""
    depth = pipeline.baseline_forward(batch["image"])
    return silog_loss(depth, batch["depth"], batch["mask"])


def restored_loss(
    pipeline: DepthPipeline, batch: Batch, generator: torch.Generator, use_aux: bool = False
) -> Tensor:
    """
    SiLog of the depth decoded from one-step restored features at a random step

    One t in [1, T] is drawn per batch; the noise is drawn per level from the
    same generator.
    """
    feats = pipeline.encode(batch["image"])
    t = int(torch.randint(1, pipeline.schedule.T + 1, (1,), generator=generator))
    noise = sample_noise(feats.high(), int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
    restored = pipeline.one_step_restore(feats.high(), t, noise)
    f1, f2 = pipeline.skips(feats, batch.get("aux_image") if use_aux else None)
    depth = pipeline.decode_depth(restored[3], restored[4], f1, f2)
    return silog_loss(depth, batch["depth"], batch["mask"])


def avlfe_loss(pipeline: DepthPipeline, batch: Batch, generator: torch.Generator) -> Tensor:
    return restored_loss(pipeline, batch, generator, use_aux=True)


def configure_stage(
    pipeline: DepthPipeline, stage: str, avlfe_mode: AVLFEMode = AVLFEMode.COMPATIBLE
) -> ParameterStore:
    """Parameter store with exactly the stage's parameters trainable"""
    store = ParameterStore.from_module(pipeline)
    store.freeze()
    store.unfreeze(pipeline.stage_prefixes(stage, avlfe_mode))
    logger.info(
        f"Stage '{stage}': {len(store.trainable_names())} trainable / {len(store)} parameters",
        extra={"stage": stage, "trainable": sum(t.numel() for t in store.trainable_parameters())},
    )
    return store


def fit(
    pipeline: DepthPipeline,
    store: ParameterStore,
    stage: str,
    loss_fn: LossFn,
    dataset: Dataset,
    config: ExperimentConfig,
    lr: float,
    epochs: int,
    metrics: Optional[RunMetrics] = None,
) -> List[float]:
    """
    Adam over the trainable parameters; frozen ones are checked bit-identical after every epoch

    Returns:
        Mean loss per epoch
    """
    snapshot = store.snapshot()
    params = store.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=lr, betas=config.optim.betas)
    loader = make_loader(dataset, config.optim.batch_size, config.seed)
    generator = torch.Generator().manual_seed(config.seed + 1)
    clip = config.model.clip_weights
    clip_block = clip is not None and any(
        store.is_trainable(name) for name in store if name.startswith(pipeline.block_name + ".")
    )

    history: List[float] = []
    pipeline.train()
    for epoch in range(1, epochs + 1):
        total, batches = 0.0, 0
        for batch in loader:
            optimizer.zero_grad()
            loss = loss_fn(pipeline, batch, generator)
            loss.backward()
            optimizer.step()
            if clip_block:
                pipeline.clip_weights(clip)
            total += float(loss.detach())
            batches += 1

        store.assert_frozen_unchanged(snapshot)
        mean = total / max(batches, 1)
        history.append(mean)
        logger.info(
            f"Stage '{stage}' epoch {epoch}/{epochs}: loss {mean:.4f}",
            extra={"stage": stage, "epoch": epoch, "loss": mean},
        )
        if metrics is not None:
            metrics.record_epoch(stage, epoch, mean)
    pipeline.eval()
    return history


def _finish(
    runs: RunRepository,
    store: ParameterStore,
    stage: str,
    history: List[float],
    metrics: Optional[RunMetrics],
) -> Dict[str, Any]:
    path = runs.checkpoint_path(stage)
    save_checkpoint(store, path)
    runs.record(path, "checkpoint")
    if metrics is not None and metrics.write() is not None:
        runs.record(metrics.path, "metrics")
    return {
        "status": "success",
        "stage": stage,
        "epochs": len(history),
        "final_loss": history[-1] if history else None,
        "checkpoint": str(path),
    }


def run_pretrain(
    config: ExperimentConfig, runs: RunRepository, metrics: Optional[RunMetrics] = None
) -> Dict[str, Any]:
    """
    Stage A: train encoder, decoder block, tail and bins head without diffusion

    Args:
        config: Experiment config
        runs: Run directory
        metrics: Optional Prometheus gauges

    Returns:
        Job result with status, final loss and checkpoint path
    """
    logger.info("Starting pretraining (stage A)")
    try:
        pipeline = build_pipeline(config)
        store = configure_stage(pipeline, "pretrain")
        history = fit(
            pipeline,
            store,
            "pretrain",
            baseline_loss,
            load_split(config.data, "train"),
            config,
            config.optim.lr_pretrain,
            config.optim.epochs_pretrain,
            metrics,
        )
        return _finish(runs, store, "pretrain", history, metrics)
    except Exception as e:
        logger.error(f"Pretraining failed: {e}")
        return {"status": "failed", "stage": "pretrain", "error": str(e)}


def load_stage(config: ExperimentConfig, runs: RunRepository, stage: str) -> DepthPipeline:
    """Build a pipeline and restore the checkpoint written by a stage"""
    path = runs.require_checkpoint(stage)
    pipeline = build_pipeline(config)
    apply_checkpoint(ParameterStore.from_module(pipeline), path, strict=True)
    pipeline.eval()
    return pipeline


def run_train_diffusion(
    config: ExperimentConfig, runs: RunRepository, metrics: Optional[RunMetrics] = None
) -> Dict[str, Any]:
    """Stage B: train the restoration networks and the decoder block on frozen encoder/tail/bins"""
    logger.info("Starting diffusion training (stage B)")
    try:
        pipeline = load_stage(config, runs, "pretrain")
        store = configure_stage(pipeline, "diffusion")
        history = fit(
            pipeline,
            store,
            "diffusion",
            restored_loss,
            load_split(config.data, "train"),
            config,
            config.optim.lr_diffusion,
            config.optim.epochs_diffusion,
            metrics,
        )
        return _finish(runs, store, "diffusion", history, metrics)
    except Exception as e:
        logger.error(f"Diffusion training failed: {e}")
        return {"status": "failed", "stage": "diffusion", "error": str(e)}


def run_train_avlfe(
    config: ExperimentConfig, runs: RunRepository, metrics: Optional[RunMetrics] = None
) -> Dict[str, Any]:
    """
    Stage C: train AV-LFE on the auxiliary view

    Compatible mode trains only avlfe.* parameters; full mode unfreezes the
    whole network. A config mode of "off" trains in compatible mode.
    """
    mode = AVLFEMode(config.avlfe.mode)
    if mode == AVLFEMode.OFF:
        mode = AVLFEMode.COMPATIBLE
    logger.info(f"Starting AV-LFE training (stage C, {mode.value} mode)")
    try:
        pipeline = load_stage(config, runs, "diffusion")
        pipeline.set_avlfe_mode(mode)
        store = configure_stage(pipeline, "avlfe", mode)
        before = store.snapshot()
        history = fit(
            pipeline,
            store,
            "avlfe",
            avlfe_loss,
            load_split(config.data, "train"),
            config,
            config.optim.lr_avlfe,
            config.optim.epochs_avlfe,
            metrics,
        )
        result = _finish(runs, store, "avlfe", history, metrics)
        changed = store.changed_since(before)
        result["mode"] = mode.value
        result["changed_components"] = sorted({name.split(".")[0] for name in changed})
        return result
    except Exception as e:
        logger.error(f"AV-LFE training failed: {e}")
        return {"status": "failed", "stage": "avlfe", "error": str(e)}
