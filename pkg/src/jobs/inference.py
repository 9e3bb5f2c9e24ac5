"""Inference and evaluation jobs"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from src.avlfe.module import AVLFEMode
from src.common.config import ExperimentConfig
from src.common.logging import get_logger
from src.core.params import ParameterStore
from src.core.persistence import apply_checkpoint, load_tensor, save_tensor
from src.core.tensor import Tensor, check_same_shape
from src.depthnet.export import save_pgm
from src.depthnet.pipeline import DepthPipeline, build_pipeline
from src.exporter.metrics import RunMetrics
from src.metrics.depth import depth_metrics, range_metrics
from src.metrics.reports import metrics_frame, metrics_row, series_frame, write_frame
from src.storage.runs import RunRepository
from src.synthdata.dataset import DepthDataset, load_split

logger = get_logger(__name__)

BASELINE_ARM = "baseline"


def load_pipeline(config: ExperimentConfig, runs: RunRepository) -> DepthPipeline:
    """Pipeline restored from the most advanced checkpoint in the run"""
    path = runs.latest_checkpoint()
    pipeline = build_pipeline(config)
    apply_checkpoint(ParameterStore.from_module(pipeline), path, strict=True)
    pipeline.eval()
    logger.info(f"Loaded pipeline from {path}")
    return pipeline


@dataclass
class Arm:
    """One evaluated configuration of a pipeline"""

    name: str
    steps: int
    use_aux: bool = False


def default_arms(config: ExperimentConfig, runs: RunRepository) -> List[Arm]:
    arms = [Arm(BASELINE_ARM, 0)]
    if (runs.root / "checkpoints" / "diffusion.ckpt").exists() or (
        runs.root / "checkpoints" / "avlfe.ckpt"
    ).exists():
        arms.append(Arm(f"diffusion-{config.diffusion.steps}", config.diffusion.steps))
    if (runs.root / "checkpoints" / "avlfe.ckpt").exists():
        arms.append(Arm(f"avlfe-{config.diffusion.steps}", config.diffusion.steps, use_aux=True))
    return arms


def predict_depth(
    pipeline: DepthPipeline, item: Dict[str, Tensor], arm: Arm, seed: int
) -> Tensor:
    """(1, 1, H, W) depth for one dataset item"""
    image = item["image"].unsqueeze(0)
    aux = item["aux_image"].unsqueeze(0) if arm.use_aux and "aux_image" in item else None
    previous = pipeline.avlfe.mode if pipeline.avlfe is not None else AVLFEMode.OFF
    if aux is not None and previous == AVLFEMode.OFF:
        pipeline.set_avlfe_mode(AVLFEMode.COMPATIBLE)
    try:
        with torch.no_grad():
            depth, _ = pipeline.infer(image, aux, steps=arm.steps, seed=seed)
    finally:
        pipeline.set_avlfe_mode(previous)
    return depth.values


@dataclass
class ArmEvaluation:
    """Per-image RMSE and pooled predictions of one arm over a split"""

    arm: Arm
    per_image: Dict[int, float] = field(default_factory=dict)
    preds: List[Tensor] = field(default_factory=list)
    gts: List[Tensor] = field(default_factory=list)
    masks: List[Tensor] = field(default_factory=list)


def evaluate_arm(
    pipeline: DepthPipeline,
    dataset: DepthDataset,
    arm: Arm,
    seed: int,
    max_images: Optional[int] = None,
) -> ArmEvaluation:
    result = ArmEvaluation(arm)
    count = len(dataset) if max_images is None else min(max_images, len(dataset))
    for position in range(count):
        item = dataset[position]
        pred = predict_depth(pipeline, item, arm, seed + position)
        gt, mask = item["depth"].unsqueeze(0), item["mask"].unsqueeze(0)
        if float(mask.sum()) == 0:
            continue
        result.per_image[int(item["index"])] = depth_metrics(pred, gt, mask).rmse
        result.preds.append(pred)
        result.gts.append(gt)
        result.masks.append(mask)
    return result


def report_rows(
    evaluation: ArmEvaluation, split: str, buckets: Sequence[Tuple[float, float]]
) -> List[dict]:
    """Pooled metrics over all masked pixels of the split, overall and per depth bucket"""
    pred = torch.cat(evaluation.preds)
    gt = torch.cat(evaluation.gts)
    mask = torch.cat(evaluation.masks)
    rows = [metrics_row(evaluation.arm.name, split, "all", depth_metrics(pred, gt, mask))]
    for (lo, hi), report in zip(sorted(buckets), range_metrics(pred, gt, mask, buckets)):
        rows.append(metrics_row(evaluation.arm.name, split, f"{lo:g}-{hi:g}", report))
    return rows


def per_image_frame(evaluations: Sequence[ArmEvaluation]) -> pd.DataFrame:
    records = [
        {"arm": ev.arm.name, "index": index, "rmse": rmse}
        for ev in evaluations
        for index, rmse in sorted(ev.per_image.items())
    ]
    return series_frame(records, ["arm", "index", "rmse"])


def run_eval(
    config: ExperimentConfig,
    runs: RunRepository,
    split: str = "test",
    arms: Optional[List[Arm]] = None,
    metrics: Optional[RunMetrics] = None,
) -> Dict[str, Any]:
    """
    Evaluate the run's pipeline on a split

    Writes eval_metrics.csv (one row per arm and bucket) and eval_per_image.csv.

    Args:
        config: Experiment config
        runs: Run directory holding checkpoints
        split: Dataset split
        arms: Configurations to evaluate (defaults to baseline plus trained stages)
        metrics: Optional Prometheus gauges

    Returns:
        Job result with the mean RMSE per arm
    """
    logger.info(f"Starting evaluation on '{split}'")
    try:
        pipeline = load_pipeline(config, runs)
        dataset = load_split(config.data, split)
        arms = arms or default_arms(config, runs)

        evaluations = [
            evaluate_arm(pipeline, dataset, arm, config.seed, config.eval.max_images)
            for arm in arms
        ]
        rows = [row for ev in evaluations for row in report_rows(ev, split, config.eval.buckets)]

        metrics_path = write_frame(metrics_frame(rows), runs.path("eval_metrics.csv"))
        per_image_path = write_frame(per_image_frame(evaluations), runs.path("eval_per_image.csv"))
        runs.record(metrics_path, "metrics-csv")
        runs.record(per_image_path, "per-image-csv")

        mean_rmse = {
            ev.arm.name: sum(ev.per_image.values()) / max(len(ev.per_image), 1) for ev in evaluations
        }
        if metrics is not None:
            for arm, rmse in mean_rmse.items():
                metrics.record_rmse(arm, split, rmse)
            if metrics.write() is not None:
                runs.record(metrics.path, "metrics")
        logger.info(f"Evaluation completed: {mean_rmse}")
        return {"status": "success", "split": split, "mean_rmse": mean_rmse}
    except Exception as e:
        logger.error(f"Evaluation failed: {e}")
        return {"status": "failed", "error": str(e)}


def evaluate_directories(
    pred_dir: Path,
    gt_dir: Path,
    runs: RunRepository,
    buckets: Sequence[Tuple[float, float]],
) -> Dict[str, Any]:
    """
    Compare depth tensor files matched by file name; pixels with gt > 0 are valid

    Writes eval_metrics.csv with the pooled metrics of the directory pair.
    """
    try:
        names = sorted(p.name for p in Path(gt_dir).glob("*.tnsr"))
        if not names:
            raise FileNotFoundError(f"no .tnsr files under {gt_dir}")
        preds, gts = [], []
        for name in names:
            gt = load_tensor(Path(gt_dir) / name)
            pred = load_tensor(Path(pred_dir) / name)
            check_same_shape(pred, gt, f"prediction and ground truth {name}")
            gts.append(gt.reshape(1, 1, *gt.shape[-2:]))
            preds.append(pred.reshape(1, 1, *gt.shape[-2:]))
        pred, gt = torch.cat(preds), torch.cat(gts)
        mask = (gt > 0).float()

        rows = [metrics_row(Path(pred_dir).name, "files", "all", depth_metrics(pred, gt, mask))]
        for (lo, hi), report in zip(sorted(buckets), range_metrics(pred, gt, mask, buckets)):
            rows.append(metrics_row(Path(pred_dir).name, "files", f"{lo:g}-{hi:g}", report))
        path = write_frame(metrics_frame(rows), runs.path("eval_metrics.csv"))
        runs.record(path, "metrics-csv")
        return {"status": "success", "files": len(names), "rmse": rows[0]["rmse"]}
    except Exception as e:
        logger.error(f"Directory evaluation failed: {e}")
        return {"status": "failed", "error": str(e)}


def run_infer(
    config: ExperimentConfig,
    runs: RunRepository,
    split: str = "test",
    steps: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Write depth maps, restoration traces and residual maps for a split

    Per image: depth tensor and 16-bit PGM at the configured steps, the
    residual between 1-step and multi-step depth, the improvement map
    |D1 - Dgt| - |DT - Dgt|, and one row per visited step in traces.csv
    with the L2 norm of each restored level.
    """
    steps = config.diffusion.steps if steps is None else steps
    logger.info(f"Starting inference on '{split}' with {steps} steps")
    try:
        pipeline = load_pipeline(config, runs)
        dataset = load_split(config.data, split)
        count = len(dataset)
        if config.eval.max_images is not None:
            count = min(config.eval.max_images, count)
        use_aux = pipeline.avlfe is not None and pipeline.avlfe.mode != AVLFEMode.OFF

        trace_rows = []
        for position in range(count):
            item = dataset[position]
            index = int(item["index"])
            image = item["image"].unsqueeze(0)
            aux = item["aux_image"].unsqueeze(0) if use_aux else None
            seed = config.seed + position
            with torch.no_grad():
                depth, trace = pipeline.infer(image, aux, steps=steps, seed=seed)
                one_step, _ = pipeline.infer(image, aux, steps=min(1, steps), seed=seed)

            stem = f"infer/{index:06d}"
            outputs = {
                f"{stem}_depth.tnsr": depth.values[0],
                f"{stem}_residual.tnsr": (depth.values - one_step.values)[0],
                f"{stem}_improvement.tnsr": (
                    (one_step.values - item["depth"]).abs() - (depth.values - item["depth"]).abs()
                )[0],
            }
            for relative, tensor in outputs.items():
                save_tensor(tensor.contiguous(), runs.path(relative))
                runs.record(runs.path(relative), "tensor")
            save_pgm(depth.values, runs.path(f"{stem}_depth.pgm"))
            runs.record(runs.path(f"{stem}_depth.pgm"), "pgm")

            if trace is not None:
                for t, feats in zip(trace.steps, trace.features):
                    for level, value in feats.items():
                        trace_rows.append(
                            {"index": index, "step": t, "level": level, "norm": float(value.norm())}
                        )

        columns = ["index", "step", "level", "norm"]
        traces = write_frame(series_frame(trace_rows, columns), runs.path("traces.csv"))
        runs.record(traces, "trace-csv")
        logger.info(f"Inference completed for {count} images")
        return {"status": "success", "images": count, "steps": steps}
    except Exception as e:
        logger.error(f"Inference failed: {e}")
        return {"status": "failed", "error": str(e)}
