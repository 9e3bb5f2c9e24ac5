"""Paired one-sided t-test with a quadrature-based t distribution"""
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, optimize, special, stats

from src.common.errors import RestoredDepthError
from src.common.logging import get_logger

logger = get_logger(__name__)

SIGNIFICANCE_LEVELS = (0.05, 0.01)


class TTestInputError(RestoredDepthError):
    """Raised for mismatched, too short or non-finite error samples"""
    pass


@dataclass
class TTestResult:
    """
    Paired t-test of H1 "a has lower error than b"

    p_value is the lower-tail probability P(T_df <= t).
    """

    n: int
    mean_diff: float
    t: float
    df: int
    p_value: float
    degenerate: bool = False

    def rejects(self, alpha: float) -> bool:
        return self.p_value < alpha

    def verdict(self, alpha: float) -> str:
        return "H1" if self.rejects(alpha) else "H0"


def t_pdf(x: float, df: int) -> float:
    log_norm = special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_norm - (df + 1) / 2 * math.log1p(x * x / df))


def t_cdf(x: float, df: int) -> float:
    """Student-t CDF by adaptive quadrature of the density from 0 to |x|"""
    if df < 1:
        raise TTestInputError(f"degrees of freedom must be >= 1, got {df}")
    if x == 0:
        return 0.5
    if math.isinf(x):
        return 1.0 if x > 0 else 0.0
    area, _ = integrate.quad(t_pdf, 0.0, abs(x), args=(df,), epsabs=1e-12, epsrel=1e-10, limit=200)
    return min(1.0, max(0.0, 0.5 + math.copysign(area, x)))


def t_critical(alpha: float, df: int) -> float:
    """Upper critical value c with P(T_df > c) = alpha"""
    if not 0.0 < alpha < 0.5:
        raise TTestInputError(f"alpha must lie in (0, 0.5), got {alpha}")
    return optimize.brentq(lambda c: 1.0 - t_cdf(c, df) - alpha, 0.0, 1e4, xtol=1e-12)


def paired_ttest(errors_a: Sequence[float], errors_b: Sequence[float]) -> TTestResult:
    """
    One-sided paired t-test on per-image errors

    Args:
        errors_a: Per-image errors of the candidate
        errors_b: Per-image errors of the reference, same images in the same order

    Returns:
        TTestResult; zero spread in the differences is flagged degenerate with
        p = 0 (a lower), 0.5 (equal) or 1 (a higher)
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise TTestInputError(f"error samples differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise TTestInputError(f"paired t-test needs n >= 2, got {n}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise TTestInputError("error samples contain non-finite values")

    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1

    if sd <= 1e-12 * max(1.0, abs(mean)):
        if mean < 0:
            t, p = -math.inf, 0.0
        elif mean > 0:
            t, p = math.inf, 1.0
        else:
            t, p = 0.0, 0.5
        logger.warning(f"Degenerate paired t-test: zero spread, mean difference {mean}")
        return TTestResult(n=n, mean_diff=mean, t=t, df=df, p_value=p, degenerate=True)

    t = mean / (sd / math.sqrt(n))
    return TTestResult(n=n, mean_diff=mean, t=t, df=df, p_value=t_cdf(t, df))


def analytic_power(shift: float, sigma: float, n: int, alpha: float = 0.05) -> float:
    """Probability of rejecting H0 at alpha when differences are N(-shift, sigma^2)"""
    df = n - 1
    noncentrality = -shift * math.sqrt(n) / sigma
    return float(stats.nct.cdf(-t_critical(alpha, df), df, noncentrality))


def rejection_rate(
    shift: float, sigma: float, n: int, trials: int, alpha: float = 0.05, seed: int = 0
) -> float:
    """Fraction of seeded simulated paired samples for which the test rejects at alpha"""
    rng = np.random.default_rng(seed)
    rejected = 0
    for _ in range(trials):
        b = rng.normal(1.0, 1.0, size=n)
        a = b + rng.normal(-shift, sigma, size=n)
        rejected += paired_ttest(a, b).rejects(alpha)
    return rejected / trials
