"""Finite-difference verification of autograd gradients"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import torch

from src.common.logging import get_logger
from src.core.params import ParameterStore

logger = get_logger(__name__)


@dataclass
class GradCheckReport:
    """
    Outcome of a gradient check: worst relative error per parameter

    `informative_by_param` counts checked coordinates with a nonzero analytic
    gradient; a parameter with none was only compared zero against zero.
    """

    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3
    coordinates: int = 0
    informative_by_param: Dict[str, int] = field(default_factory=dict)
    failure: Optional[str] = None

    @property
    def informative(self) -> int:
        return sum(self.informative_by_param.values())

    @property
    def zero_gradient_params(self) -> List[str]:
        """Parameters whose checked coordinates all had a zero analytic gradient"""
        return [name for name, count in self.informative_by_param.items() if count == 0]

    @property
    def max_error(self) -> float:
        if self.failure is not None:
            return math.inf
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error < self.tolerance


def _relative_error(analytic: float, numeric: float, atol: float) -> float:
    return abs(analytic - numeric) / (max(abs(analytic), abs(numeric)) + atol)


def grad_check(
    f: Callable[[], torch.Tensor],
    store: ParameterStore,
    eps: float = 1e-3,
    coordinates: int = 64,
    seed: int = 0,
    rtol: float = 1e-3,
    atol: float = 1e-6,
) -> GradCheckReport:
    """
    Compare autograd gradients of a scalar function against central differences

    Each trainable parameter is checked on up to ``coordinates`` randomly chosen
    entries; the numeric derivative is (f(p+eps) - f(p-eps)) / (2*eps).
    Run it on float64 parameters: float32 rounding swamps the difference quotient.

    Args:
        f: Zero-argument callable returning a scalar loss from the store's tensors
        store: Parameters to check; only trainable entries are perturbed
        eps: Finite-difference step
        coordinates: Coordinates sampled per parameter (seeded)
        seed: Seed for coordinate subsampling
        rtol: Pass threshold on the relative error
        atol: Absolute floor added to the relative-error denominator

    Returns:
        GradCheckReport; a non-finite loss yields a failure report, not an exception
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    report = GradCheckReport(tolerance=rtol)
    names = store.trainable_names()
    tensors = [store[name] for name in names]

    loss = f()
    if not bool(torch.isfinite(loss).all()):
        report.failure = f"non-finite loss at unperturbed parameters: {loss.item()}"
        logger.warning(report.failure)
        return report

    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    generator = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        for name, tensor, grad in zip(names, tensors, grads):
            flat = tensor.data.view(-1)
            analytic = torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            count = min(coordinates, flat.numel())
            picks = torch.randperm(flat.numel(), generator=generator)[:count]

            worst = 0.0
            informative = 0
            for index in picks.tolist():
                original = flat[index].item()
                flat[index] = original + eps
                plus = f().item()
                flat[index] = original - eps
                minus = f().item()
                flat[index] = original

                if not (math.isfinite(plus) and math.isfinite(minus)):
                    report.failure = f"non-finite loss while perturbing {name}[{index}]"
                    logger.warning(report.failure)
                    return report

                numeric = (plus - minus) / (2 * eps)
                if abs(analytic[index].item()) > atol:
                    informative += 1
                worst = max(worst, _relative_error(analytic[index].item(), numeric, atol))

            report.errors[name] = worst
            report.informative_by_param[name] = informative
            report.coordinates += count

    logger.debug(
        f"Gradient check over {len(names)} parameters: max rel err {report.max_error:.3e}",
        extra={
            "coordinates": report.coordinates,
            "informative": report.informative,
            "passed": report.passed,
        },
    )
    return report
