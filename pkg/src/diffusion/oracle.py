"""Oracle predictor returning the true degradation and noise"""
from typing import Dict

from src.core.tensor import Tensor
from src.diffusion.conditions import ConditionMaps
from src.diffusion.restoration import Predictions
from src.diffusion.schedule import Step


class OraclePredictor:
    """
    Stands in for R_theta with ground-truth answers

    Used to verify that the sampler telescopes back to F_gt exactly.
    """

    def __init__(self, degradation: Dict[int, Tensor], noise: Dict[int, Tensor]):
        self.degradation = degradation
        self.noise = noise

    def predict_level(self, level: int, F_t: Tensor, t: Step, cond: ConditionMaps) -> Predictions:
        return self.degradation[level], self.noise[level]
