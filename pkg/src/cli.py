"""
Command-line entry point

Usage:
    restored-depth gen-data --config exp.json --out runs/exp
    restored-depth pretrain --config exp.json --out runs/exp
    restored-depth train-diffusion --config exp.json --out runs/exp
    restored-depth eval --config exp.json --out runs/exp --steps 6
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import torch

from src.common.config import ConfigError, ExperimentConfig, get_settings, load_experiment_config
from src.common.logging import attach_run_log, detach_run_log, get_logger, setup_logging
from src.exporter.metrics import RunMetrics
from src.jobs.experiments import (
    run_ablate_decoders,
    run_ablate_steps,
    run_avlfe_probe,
    run_deviation,
    run_featopt,
    run_gradcheck,
    run_params,
    run_ttest,
)
from src.jobs.inference import evaluate_directories, run_eval, run_infer
from src.jobs.training import run_pretrain, run_train_avlfe, run_train_diffusion
from src.storage.runs import RunRepository
from src.synthdata.dataset import generate_dataset

logger = get_logger(__name__)

JobResult = Dict[str, Any]
Handler = Callable[[argparse.Namespace, ExperimentConfig, RunRepository, RunMetrics], JobResult]


def _gen_data(
    args: argparse.Namespace, config: ExperimentConfig, runs: RunRepository, metrics: RunMetrics
) -> JobResult:
    out_dir = Path(config.data.path) if config.data.path else runs.root / "data"
    try:
        manifest = generate_dataset(config.data, out_dir)
    except Exception as e:
        logger.error(f"Dataset generation failed: {e}")
        return {"status": "failed", "error": str(e)}
    if manifest.resolve().is_relative_to(runs.root.resolve()):
        runs.record(manifest, "dataset-manifest")
    return {"status": "success", "manifest": str(manifest)}


def _eval(
    args: argparse.Namespace, config: ExperimentConfig, runs: RunRepository, metrics: RunMetrics
) -> JobResult:
    if args.pred_dir or args.gt_dir:
        if not (args.pred_dir and args.gt_dir):
            return {"status": "failed", "error": "--pred-dir and --gt-dir go together"}
        return evaluate_directories(Path(args.pred_dir), Path(args.gt_dir), runs, config.eval.buckets)
    return run_eval(config, runs, split=args.split, metrics=metrics)


HANDLERS: Dict[str, Handler] = {
    "gen-data": _gen_data,
    "pretrain": lambda a, c, r, m: run_pretrain(c, r, m),
    "train-diffusion": lambda a, c, r, m: run_train_diffusion(c, r, m),
    "train-avlfe": lambda a, c, r, m: run_train_avlfe(c, r, m),
    "infer": lambda a, c, r, m: run_infer(c, r, split=a.split),
    "eval": _eval,
    "featopt": lambda a, c, r, m: run_featopt(c, r, split=a.split),
    "deviation": lambda a, c, r, m: run_deviation(c, r, split=a.split),
    "ttest": lambda a, c, r, m: run_ttest(
        c, r, Path(a.input) if a.input else None, reference=a.reference
    ),
    "params": lambda a, c, r, m: run_params(c, r),
    "ablate-steps": lambda a, c, r, m: run_ablate_steps(c, r, split=a.split),
    "ablate-decoders": lambda a, c, r, m: run_ablate_decoders(c, r, seeds=a.seeds, split=a.split),
    "avlfe-probe": lambda a, c, r, m: run_avlfe_probe(c, r),
    "gradcheck": lambda a, c, r, m: run_gradcheck(c, r, m),
}

STAGE_COMMANDS = {"pretrain": "pretrain", "train-diffusion": "diffusion", "train-avlfe": "avlfe"}

HELP = {
    "gen-data": "Generate the synthetic dataset",
    "pretrain": "Stage A: train the baseline without diffusion",
    "train-diffusion": "Stage B: train restoration networks and decoder block",
    "train-avlfe": "Stage C: train AV-LFE (compatible or full mode)",
    "infer": "Write depth maps, residual maps and restoration traces",
    "eval": "Metrics CSV per arm and depth bucket",
    "featopt": "Per-image feature optimization curves per level",
    "deviation": "Feature deviation against proxy features across steps",
    "ttest": "Paired t-tests on per-image RMSE",
    "params": "Parameter counts per component and decoder variant",
    "ablate-steps": "Held-out RMSE for every inference step count",
    "ablate-decoders": "Train and compare inv, conv and tf decoder blocks over seeds",
    "avlfe-probe": "Alignment probe on a synthetic stereo pair",
    "gradcheck": "Finite-difference check of the trainable components",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="Run seed")
    common.add_argument("--steps", type=int, help="Inference steps (<= T)")
    common.add_argument("--decoder", choices=["inv", "conv", "tf"], help="Decoder block variant")
    common.add_argument("--avlfe", choices=["off", "compatible", "full"], help="AV-LFE mode")
    common.add_argument(
        "--literal-eq9", action="store_true", help="Subtract the full degradation at every step"
    )
    common.add_argument("--out", help="Run output directory")

    parser = argparse.ArgumentParser(
        prog="restored-depth", description="Depth estimation as feature restoration"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in HANDLERS:
        sub = subparsers.add_parser(command, parents=[common], help=HELP[command])
        if command in ("infer", "eval", "featopt", "deviation", "ablate-steps", "ablate-decoders"):
            sub.add_argument("--split", default="test", choices=["train", "val", "test"])
        if command == "eval":
            sub.add_argument("--pred-dir", help="Directory of predicted depth tensor files")
            sub.add_argument("--gt-dir", help="Directory of ground-truth depth tensor files")
        if command == "ttest":
            sub.add_argument("--input", help="Per-image CSV (arm, index, rmse)")
            sub.add_argument("--reference", default="baseline", help="Reference arm")
        if command == "ablate-decoders":
            sub.add_argument("--seeds", type=int, nargs="+", help="Seeds (default: eval.seeds)")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted-key config overrides from flags; unset flags leave file keys alone"""
    return {
        "seed": args.seed,
        "diffusion.steps": args.steps,
        "model.decoder": args.decoder,
        "avlfe.mode": args.avlfe,
        "schedule.literal_eq9": True if args.literal_eq9 else None,
        "output_dir": args.out,
    }


def run(command: str, config: ExperimentConfig, args: argparse.Namespace) -> JobResult:
    """
    Run a subcommand in the config's output directory

    The resolved config and a manifest of produced files are written next to
    the outputs.
    """
    if config.output_dir is None:
        default = Path(get_settings().default_output_dir) / "default"
        config = config.model_copy(update={"output_dir": str(default)})
    if command in STAGE_COMMANDS:
        config = config.model_copy(update={"stage": STAGE_COMMANDS[command]})
    runs = RunRepository(config.output_dir)
    runs.record(runs.save_config(config), "config")
    metrics = RunMetrics(runs.root)

    run_log = attach_run_log(runs.root)
    try:
        logger.info(
            f"Running '{command}' in {runs.root}", extra={"command": command, "seed": config.seed}
        )
        result = HANDLERS[command](args, config, runs, metrics)
    finally:
        detach_run_log(run_log)
    runs.record(run_log.baseFilename, "log")
    runs.write_manifest(command, result)
    return result


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    settings = get_settings()
    if settings.torch_threads > 0:
        torch.set_num_threads(settings.torch_threads)

    args = build_parser().parse_args(argv)
    try:
        config = load_experiment_config(args.config, overrides_from_args(args))
    except ConfigError as e:
        logger.error(f"Invalid config: {e}")
        failure = {"status": "failed", "error": str(e), "key_path": e.key_path}
        print(json.dumps(failure), file=sys.stderr)
        return 1

    result = run(args.command, config, args)
    print(json.dumps(result, sort_keys=True, default=str))
    return 0 if result.get("status") == "success" else 1


if __name__ == "__main__":
    sys.exit(main())
