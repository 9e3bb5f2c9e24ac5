"""Experiment jobs - diagnostics, significance tests and ablations"""
import copy
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import ndimage

from src.avlfe.deform import deform_gather
from src.avlfe.module import AVLFEModule, AVLFEMode
from src.common.config import ExperimentConfig
from src.common.logging import get_logger
from src.core.gradcheck import GradCheckReport, grad_check
from src.core.params import ParameterStore
from src.depthnet.bins import BinsPrediction
from src.depthnet.pipeline import DepthPipeline, build_pipeline
from src.diffusion.conditions import build_conditions
from src.exporter.metrics import RunMetrics
from src.featopt.deviation import measure_deviation
from src.featopt.optimize import optimize_features, proxy_gt_feature
from src.jobs.inference import (
    BASELINE_ARM,
    Arm,
    evaluate_arm,
    load_pipeline,
    per_image_frame,
)
from src.jobs.training import run_pretrain, run_train_diffusion
from src.metrics.reports import (
    comparison_frame,
    series_frame,
    ttest_frame,
    write_frame,
)
from src.metrics.significance import TTestResult, paired_ttest
from src.storage.runs import MissingCheckpointError, RunRepository
from src.synthdata.dataset import DepthDataset, load_split
from src.synthdata.scenes import DepthSample, gen_aux_view

logger = get_logger(__name__)


def _image_count(available: int, limit: Optional[int]) -> int:
    return available if limit is None else min(limit, available)


def run_featopt(config: ExperimentConfig, runs: RunRepository, split: str = "test") -> Dict[str, Any]:
    """
    Optimize each configured feature level per test image

    Writes featopt_curves.csv (index, level, step, rmse, best) and
    featopt_summary.csv (mean baseline, final and reduction per level).
    """
    logger.info("Starting per-image feature optimization")
    try:
        pipeline = load_pipeline(config, runs)
        dataset = load_split(config.data, split)
        count = _image_count(len(dataset), config.featopt.max_images)

        records, summary = [], []
        for level in config.featopt.levels:
            reductions, finals, baselines = [], [], []
            for position in range(count):
                curve = optimize_features(
                    pipeline,
                    dataset[position],
                    level,
                    config.featopt.steps,
                    config.featopt.lr,
                    config.optim.betas,
                )
                for step, (raw, best) in enumerate(zip(curve.rmse, curve.best)):
                    records.append(
                        {"index": curve.index, "level": level, "step": step, "rmse": raw, "best": best}
                    )
                reductions.append(curve.reduction)
                finals.append(curve.best[-1])
                baselines.append(curve.rmse[0])
            summary.append(
                {
                    "level": level,
                    "images": count,
                    "baseline_rmse": float(np.mean(baselines)),
                    "final_rmse": float(np.mean(finals)),
                    "mean_reduction": float(np.mean(reductions)),
                }
            )
        if not summary:
            raise ValueError("featopt.levels is empty")
        lowest = min(summary, key=lambda s: s["level"])["mean_reduction"]
        for row in summary:
            row["gain_vs_lowest_level"] = row["mean_reduction"] - lowest

        curves = write_frame(
            series_frame(records, ["index", "level", "step", "rmse", "best"]),
            runs.path("featopt_curves.csv"),
        )
        summary_path = write_frame(pd.DataFrame(summary), runs.path("featopt_summary.csv"))
        runs.record(curves, "curve-csv")
        runs.record(summary_path, "summary-csv")
        highest = max(summary, key=lambda s: s["level"])
        return {
            "status": "success",
            "levels": {s["level"]: s["mean_reduction"] for s in summary},
            "higher_level_gain": bool(highest["gain_vs_lowest_level"] > 0),
        }
    except Exception as e:
        logger.error(f"Feature optimization failed: {e}")
        return {"status": "failed", "error": str(e)}


def deviation_records(
    config: ExperimentConfig,
    pipeline: DepthPipeline,
    dataset: DepthDataset,
    steps: int,
    seed: int,
) -> Tuple[List[Dict[str, Any]], List[float]]:
    """Deviation rows (variant, index, step, distance) and per-image decreasing fractions"""
    records, fractions = [], []
    for position in range(_image_count(len(dataset), config.featopt.max_images)):
        item = dataset[position]
        proxy = proxy_gt_feature(
            pipeline, item, config.featopt.proxy_steps, config.featopt.lr, config.optim.betas
        )
        trace = measure_deviation(pipeline, item, proxy, steps, seed=seed + position)
        for t, distance in zip(trace.steps, trace.distances):
            records.append(
                {"variant": trace.variant, "index": trace.index, "step": t, "distance": distance}
            )
        fraction = trace.decreasing_fraction()
        if not math.isnan(fraction):
            fractions.append(fraction)
    return records, fractions


def deviation_comparison(deviations: List[Dict[str, Any]], runs: RunRepository) -> Dict[str, Any]:
    """
    Mean decreasing-deviation fraction per decoder variant, written to ablate_decoders_deviation.csv

    The comparison against the invertible decoder is reported, not enforced.
    """
    frame = series_frame(deviations, ["variant", "seed", "decreasing_fraction"])
    means = frame.groupby("variant")["decreasing_fraction"].mean().to_dict()
    reference = means.get("inv", math.nan)
    rows = [
        {
            "variant": variant,
            "decreasing_fraction": fraction,
            "inv_at_least": bool(reference >= fraction),
        }
        for variant, fraction in sorted(means.items())
    ]
    path = write_frame(
        series_frame(rows, ["variant", "decreasing_fraction", "inv_at_least"]),
        runs.path("ablate_decoders_deviation.csv"),
    )
    runs.record(path, "deviation-csv")
    return {
        "decreasing_fraction": means,
        "inv_deviation_at_least": {r["variant"]: r["inv_at_least"] for r in rows if r["variant"] != "inv"},
    }


def run_deviation(
    config: ExperimentConfig,
    runs: RunRepository,
    steps: Optional[int] = None,
    split: str = "test",
) -> Dict[str, Any]:
    """
    Distance of restored features to per-image proxy features at every inference step

    Writes deviation.csv (variant, index, step, distance) and returns the mean
    fraction of steps with decreasing deviation.
    """
    steps = config.diffusion.steps if steps is None else steps
    logger.info(f"Starting deviation measurement over {steps} steps")
    try:
        pipeline = load_pipeline(config, runs)
        dataset = load_split(config.data, split)
        records, fractions = deviation_records(config, pipeline, dataset, steps, config.seed)

        path = write_frame(
            series_frame(records, ["variant", "index", "step", "distance"]), runs.path("deviation.csv")
        )
        runs.record(path, "trace-csv")
        mean_fraction = float(np.mean(fractions)) if fractions else math.nan
        return {
            "status": "success",
            "variant": pipeline.decoder_variant,
            "decreasing_fraction": mean_fraction,
        }
    except Exception as e:
        logger.error(f"Deviation measurement failed: {e}")
        return {"status": "failed", "error": str(e)}


def ttests_against(frame: pd.DataFrame, reference: str) -> List[Tuple[str, TTestResult]]:
    """Paired t-test of every arm against the reference arm on images both evaluated"""
    wide = frame.pivot(index="index", columns="arm", values="rmse").dropna()
    results = []
    for arm in sorted(wide.columns):
        if arm == reference:
            continue
        result = paired_ttest(wide[arm].to_numpy(), wide[reference].to_numpy())
        results.append((f"{arm}<{reference}", result))
    return results


def run_ttest(
    config: ExperimentConfig,
    runs: RunRepository,
    per_image: Optional[Path] = None,
    reference: str = BASELINE_ARM,
) -> Dict[str, Any]:
    """
    Paired t-tests on per-image RMSE from an evaluation

    Args:
        config: Experiment config
        runs: Run directory (ttest.csv is written here)
        per_image: CSV with arm, index, rmse columns (defaults to the run's eval_per_image.csv)
        reference: Arm every other arm is tested against

    Returns:
        Job result with p-values per pair
    """
    try:
        source = per_image or runs.root / "eval_per_image.csv"
        frame = pd.read_csv(source)
        results = ttests_against(frame, reference)
        path = write_frame(ttest_frame(results), runs.path("ttest.csv"))
        runs.record(path, "ttest-csv")
        return {"status": "success", "p_values": {pair: r.p_value for pair, r in results}}
    except Exception as e:
        logger.error(f"t-test failed: {e}")
        return {"status": "failed", "error": str(e)}


def run_params(config: ExperimentConfig, runs: RunRepository) -> Dict[str, Any]:
    """Per-component parameter counts for every decoder variant, written to params.csv"""
    try:
        rows = []
        for variant in ("inv", "conv", "tf"):
            variant_config = config.model_copy(
                update={"model": config.model.model_copy(update={"decoder": variant})}
            )
            pipeline = build_pipeline(variant_config)
            for component, count in pipeline.parameter_counts().items():
                rows.append({"variant": variant, "component": component, "parameters": count})
        path = write_frame(pd.DataFrame(rows), runs.path("params.csv"))
        runs.record(path, "params-csv")
        return {"status": "success", "rows": len(rows)}
    except Exception as e:
        logger.error(f"Parameter count failed: {e}")
        return {"status": "failed", "error": str(e)}


def _comparison(
    frame: pd.DataFrame, reference: str, runs: RunRepository, prefix: str
) -> Dict[str, Any]:
    mean_rmse = frame.groupby("arm")["rmse"].mean().to_dict()
    comparison = write_frame(comparison_frame(mean_rmse, reference), runs.path(f"{prefix}.csv"))
    tests = write_frame(ttest_frame(ttests_against(frame, reference)), runs.path(f"{prefix}_ttest.csv"))
    runs.record(comparison, "comparison-csv")
    runs.record(tests, "ttest-csv")
    return {"status": "success", "mean_rmse": mean_rmse}


def run_ablate_steps(
    config: ExperimentConfig, runs: RunRepository, split: str = "test"
) -> Dict[str, Any]:
    """Held-out RMSE for 0..T inference steps on one checkpoint, against the no-diffusion arm"""
    try:
        pipeline = load_pipeline(config, runs)
        dataset = load_split(config.data, split)
        arms = [Arm(BASELINE_ARM, 0)] + [
            Arm(f"diffusion-{s}", s) for s in range(1, pipeline.schedule.T + 1)
        ]
        evaluations = [
            evaluate_arm(pipeline, dataset, arm, config.seed, config.eval.max_images) for arm in arms
        ]
        frame = per_image_frame(evaluations)
        runs.record(write_frame(frame, runs.path("ablate_steps_per_image.csv")), "per-image-csv")
        return _comparison(frame, BASELINE_ARM, runs, "ablate_steps")
    except Exception as e:
        logger.error(f"Step ablation failed: {e}")
        return {"status": "failed", "error": str(e)}


def run_ablate_decoders(
    config: ExperimentConfig,
    runs: RunRepository,
    seeds: Optional[Sequence[int]] = None,
    split: str = "test",
) -> Dict[str, Any]:
    """
    Train stages A and B per decoder variant and seed, then compare held-out RMSE

    Per-image RMSE is averaged over seeds before the paired tests against the
    invertible decoder. Each trained variant also gets a deviation trace; the
    mean decreasing fraction per variant lands in ablate_decoders_deviation.csv.
    """
    seeds = list(config.eval.seeds if seeds is None else seeds)
    try:
        records, deviations = [], []
        for variant in ("inv", "conv", "tf"):
            for seed in seeds:
                variant_config = config.model_copy(
                    update={"seed": seed, "model": config.model.model_copy(update={"decoder": variant})}
                )
                child = runs.child(f"{variant}-seed{seed}")
                child.save_config(variant_config)
                for job in (run_pretrain, run_train_diffusion):
                    result = job(variant_config, child)
                    if result["status"] != "success":
                        raise RuntimeError(f"{variant} seed {seed}: {result.get('error')}")
                pipeline = load_pipeline(variant_config, child)
                evaluation = evaluate_arm(
                    pipeline,
                    load_split(variant_config.data, split),
                    Arm(variant, config.diffusion.steps),
                    seed,
                    config.eval.max_images,
                )
                for index, rmse in evaluation.per_image.items():
                    records.append({"arm": variant, "seed": seed, "index": index, "rmse": rmse})
                _, fractions = deviation_records(
                    variant_config, pipeline, load_split(variant_config.data, split), config.diffusion.steps, seed
                )
                deviations.extend(
                    {"variant": variant, "seed": seed, "decreasing_fraction": fraction} for fraction in fractions
                )

        frame = pd.DataFrame(records).groupby(["arm", "index"], as_index=False)["rmse"].mean()
        runs.record(write_frame(frame, runs.path("ablate_decoders_per_image.csv")), "per-image-csv")
        result = _comparison(frame, "inv", runs, "ablate_decoders")
        result.update(deviation_comparison(deviations, runs))
        return result
    except Exception as e:
        logger.error(f"Decoder ablation failed: {e}")
        return {"status": "failed", "error": str(e)}


def stereo_pair(size: int = 32, disparity: int = 4, seed: int = 0) -> DepthSample:
    """Smooth random texture at uniform depth, with its auxiliary view shifted by `disparity` px"""
    rng = np.random.default_rng(seed)
    texture = ndimage.gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 3, 3))
    texture = (texture - texture.min()) / (texture.max() - texture.min())
    bf = 16.0 * disparity
    sample = DepthSample(
        index=0,
        image=torch.from_numpy(texture.astype(np.float32)),
        depth=torch.full((1, size, size), 16.0),
        mask=torch.ones(1, size, size),
    )
    return gen_aux_view(sample, bf)


def disparity_probe(
    steps: int = 300, lr: float = 1e-2, size: int = 32, disparity: int = 4, seed: int = 0
) -> Dict[str, float]:
    """
    Train an AV-LFE offset head to align a shifted view and report its mean horizontal offset

    The auxiliary view is the main view moved left by `disparity` px, so
    aligned offsets point left (negative).
    """
    torch.manual_seed(seed)
    pair = stereo_pair(size, disparity, seed)
    main, aux = pair.image.unsqueeze(0), pair.aux_image.unsqueeze(0)
    module = AVLFEModule(3, points=1, mode=AVLFEMode.COMPATIBLE)
    sampler = module.sampler
    optimizer = torch.optim.Adam(sampler.offset_net.parameters(), lr=lr)
    margin = disparity + 2
    interior = (slice(None), slice(None), slice(margin, size - margin), slice(margin, size - margin))

    losses = []
    for _ in range(steps):
        optimizer.zero_grad()
        offsets, _ = sampler.predict_offsets(main, aux)
        aligned = deform_gather(aux, offsets)[:, :, 0]
        loss = ((aligned - main)[interior] ** 2).mean()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))

    with torch.no_grad():
        offsets, _ = sampler.predict_offsets(main, aux)
    return {
        "mean_dx": float(offsets[:, 1][interior[1:]].mean()),
        "mean_dy": float(offsets[:, 0][interior[1:]].mean()),
        "true_dx": -float(disparity),
        "initial_loss": losses[0] if losses else math.nan,
        "final_loss": losses[-1] if losses else math.nan,
    }


def run_avlfe_probe(config: ExperimentConfig, runs: RunRepository) -> Dict[str, Any]:
    try:
        result = disparity_probe(seed=config.seed)
        path = write_frame(pd.DataFrame([result]), runs.path("avlfe_probe.csv"))
        runs.record(path, "probe-csv")
        logger.info(f"AV-LFE probe: mean dx {result['mean_dx']:.3f} (true {result['true_dx']})")
        return {"status": "success", **result}
    except Exception as e:
        logger.error(f"AV-LFE probe failed: {e}")
        return {"status": "failed", "error": str(e)}


def gradcheck_components(pipeline: DepthPipeline, seed: int = 0) -> Dict[str, GradCheckReport]:
    """
    Finite-difference check of float64 copies of the trainable components

    Components: decoder block, level-3 restoration net, bins head, AV-LFE sampler.
    """
    generator = torch.Generator().manual_seed(seed)
    model = pipeline.model_config
    c1, _, c3, c4 = model.encoder_channels

    def randn(*shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=generator, dtype=torch.float64)

    block = copy.deepcopy(pipeline.block).double()
    x = randn(1, model.restored_channels, 2, 2)

    net = copy.deepcopy(pipeline.diffusion.level3).double()
    f3, f4 = randn(1, c3, 2, 2), randn(1, c4, 1, 1)
    cond = build_conditions(f3, f4, 3)

    bins = copy.deepcopy(pipeline.bins).double()
    tail_feature, global_feature = randn(1, model.tail_width, 2, 2), randn(1, c4, 1, 1)
    weights = torch.arange(model.bins, dtype=torch.float64).view(1, -1, 1, 1)

    def bins_objective(prediction: BinsPrediction) -> torch.Tensor:
        return (prediction.probs * weights).sum() + prediction.centers.sum()

    reports = {
        pipeline.block_name: grad_check(
            lambda: (block(x) ** 2).sum(), ParameterStore.from_module(block), seed=seed
        ),
        "diffusion.level3": grad_check(
            lambda: sum((p**2).sum() for p in net(f3, 2, cond.C_mul)),
            ParameterStore.from_module(net),
            seed=seed,
        ),
        "bins": grad_check(
            lambda: bins_objective(bins(tail_feature, global_feature)),
            ParameterStore.from_module(bins),
            seed=seed,
        ),
    }
    if pipeline.avlfe is not None:
        sampler = copy.deepcopy(pipeline.avlfe.level1.sampler).double()
        # fractional offsets keep every sample position away from the bilinear kinks
        with torch.no_grad():
            shape = sampler.offset_net.bias.shape
            fraction = torch.rand(shape, generator=generator, dtype=torch.float64)
            sampler.offset_net.bias.copy_(0.25 + 0.5 * fraction)
        f_main, f_aux = randn(1, c1, 3, 3), randn(1, c1, 3, 3)
        reports["avlfe.level1.sampler"] = grad_check(
            lambda: (sampler(f_main, f_aux) ** 2).sum(), ParameterStore.from_module(sampler), seed=seed
        )
    return reports


def seed_zero_parameters(
    pipeline: DepthPipeline, seed: int = 0, scale: float = 0.05, skip: str = "avlfe"
) -> List[str]:
    """
    Replace all-zero parameter tensors with small seeded noise, in place

    Zero-initialized output heads block every gradient upstream of them, so a
    gradient check on a fresh pipeline would compare zeros with zeros. AV-LFE
    parameters are left alone; the sampler check sets its own offsets.

    Returns:
        Names of the parameters that were seeded
    """
    generator = torch.Generator().manual_seed(seed)
    seeded = []
    with torch.no_grad():
        for name, param in pipeline.named_parameters():
            if name.startswith(skip) or bool(param.any()):
                continue
            param.copy_(scale * torch.randn(param.shape, generator=generator))
            seeded.append(name)
    return seeded


def gradcheck_pipeline(config: ExperimentConfig, runs: RunRepository) -> DepthPipeline:
    """The run's latest checkpoint when one exists, else a fresh pipeline; zero tensors seeded"""
    try:
        pipeline = load_pipeline(config, runs)
    except MissingCheckpointError:
        pipeline = build_pipeline(config)
    seeded = seed_zero_parameters(pipeline, config.seed)
    if seeded:
        logger.info(f"Seeded {len(seeded)} zero-initialized parameters before the gradient check")
    return pipeline


def run_gradcheck(
    config: ExperimentConfig, runs: RunRepository, metrics: Optional[RunMetrics] = None
) -> Dict[str, Any]:
    try:
        pipeline = gradcheck_pipeline(config, runs)
        reports = gradcheck_components(pipeline, config.seed)
        rows = [
            {
                "component": name,
                "max_rel_error": report.max_error,
                "coordinates": report.coordinates,
                "informative": report.informative,
                "zero_gradient_params": len(report.zero_gradient_params),
                "passed": report.passed,
            }
            for name, report in reports.items()
        ]
        path = write_frame(pd.DataFrame(rows), runs.path("gradcheck.csv"))
        runs.record(path, "gradcheck-csv")
        if metrics is not None:
            for name, report in reports.items():
                metrics.record_gradcheck(name, report)
            if metrics.write() is not None:
                runs.record(metrics.path, "metrics")
        failed = [name for name, report in reports.items() if not report.passed]
        if failed:
            return {"status": "failed", "error": f"gradient check failed for {failed}"}
        vacuous = [name for name, report in reports.items() if report.informative == 0]
        if vacuous:
            return {"status": "failed", "error": f"only zero gradients checked for {vacuous}"}
        return {"status": "success", "components": len(reports)}
    except Exception as e:
        logger.error(f"Gradient check failed: {e}")
        return {"status": "failed", "error": str(e)}
