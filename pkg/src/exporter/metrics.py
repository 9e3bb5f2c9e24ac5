"""Prometheus metrics for training and evaluation runs"""
from pathlib import Path
from typing import Optional, Union

from prometheus_client import CollectorRegistry, Gauge, write_to_textfile

from src.common.logging import get_logger
from src.core.gradcheck import GradCheckReport

logger = get_logger(__name__)

METRICS_FILENAME = "metrics.prom"


class RunMetrics:
    """
    Gauges on a per-run registry, written as a Prometheus text file into the run directory

    A private registry keeps repeated runs in one process from colliding.
    """

    def __init__(self, run_dir: Union[str, Path]):
        self.path = Path(run_dir) / METRICS_FILENAME
        self.registry = CollectorRegistry()
        self.stage_loss = Gauge(
            "rdepth_stage_loss",
            "Mean training loss over the last completed epoch",
            ["stage"],
            registry=self.registry,
        )
        self.epoch = Gauge(
            "rdepth_stage_epoch",
            "Last completed training epoch",
            ["stage"],
            registry=self.registry,
        )
        self.heldout_rmse = Gauge(
            "rdepth_heldout_rmse_meters",
            "RMSE on a held-out split",
            ["model", "split"],
            registry=self.registry,
        )
        self.gradcheck_error = Gauge(
            "rdepth_gradcheck_max_relative_error",
            "Worst relative error of the last gradient check",
            ["component"],
            registry=self.registry,
        )

    def record_epoch(self, stage: str, epoch: int, loss: float) -> None:
        self.stage_loss.labels(stage=stage).set(loss)
        self.epoch.labels(stage=stage).set(epoch)

    def record_rmse(self, model: str, split: str, rmse: float) -> None:
        self.heldout_rmse.labels(model=model, split=split).set(rmse)

    def record_gradcheck(self, component: str, report: GradCheckReport) -> None:
        self.gradcheck_error.labels(component=component).set(report.max_error)

    def write(self) -> Optional[Path]:
        """Write the registry to metrics.prom; failures are logged, never raised"""
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            write_to_textfile(str(self.path), self.registry)
            return self.path
        except OSError as e:
            logger.error(f"Failed to write metrics to {self.path}: {e}")
            return None
