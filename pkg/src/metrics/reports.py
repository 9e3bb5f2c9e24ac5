"""CSV reports written with pandas"""
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence, Tuple, Union

import pandas as pd

from src.metrics.depth import METRIC_NAMES, MetricsReport
from src.metrics.significance import SIGNIFICANCE_LEVELS, TTestResult

PathLike = Union[str, Path]
FLOAT_FORMAT = "%.6f"


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def metrics_row(model: str, split: str, bucket: str, report: MetricsReport) -> dict:
    return {"model": model, "split": split, "bucket": bucket, **report.as_dict()}


def metrics_frame(rows: Iterable[Mapping[str, object]]) -> pd.DataFrame:
    columns = ["model", "split", "bucket", *METRIC_NAMES, "count"]
    return pd.DataFrame(list(rows), columns=columns)


def ttest_frame(results: Sequence[Tuple[str, TTestResult]]) -> pd.DataFrame:
    rows = []
    for pair, result in results:
        row = {
            "pair": pair,
            "n": result.n,
            "mean_diff": result.mean_diff,
            "t": result.t,
            "df": result.df,
            "p": result.p_value,
            "degenerate": result.degenerate,
        }
        for alpha in SIGNIFICANCE_LEVELS:
            row[f"verdict@{alpha}"] = result.verdict(alpha)
        rows.append(row)
    return pd.DataFrame(rows)


def delta_rmse_percent(reference: float, candidate: float) -> float:
    """Relative RMSE reduction of candidate against reference, in percent"""
    return 100.0 * (reference - candidate) / reference


def comparison_frame(mean_rmse: Mapping[str, float], reference: str) -> pd.DataFrame:
    """Mean RMSE per arm with the relative reduction against the reference arm"""
    rows: List[dict] = []
    for arm, rmse in mean_rmse.items():
        rows.append(
            {"arm": arm, "rmse": rmse, "delta_rmse_pct": delta_rmse_percent(mean_rmse[reference], rmse)}
        )
    return pd.DataFrame(rows)


def series_frame(records: Iterable[Mapping[str, object]], columns: Sequence[str]) -> pd.DataFrame:
    """Long-format series (curves, traces) with the given column order"""
    return pd.DataFrame(list(records), columns=list(columns))
