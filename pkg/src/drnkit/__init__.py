"""Distributional refinement of a gamma GLM baseline, with competing models,
proper-scoring evaluation and Kernel SHAP explanations."""

from drnkit.autodiff import MlpParams, Tensor, init_mlp, mlp_forward
from drnkit.glm import GammaDist, GammaGlmModel, fit_gamma_glm
from drnkit.partition import Partition, merge_cutpoints, refinement_bounds, uniform_cutpoints
from drnkit.drn import DrnModel, RefinedDistribution, drn_forward
from drnkit.losses import PenaltyWeights
from drnkit.train import TrainingConfig, TrainLog

__all__ = [
    "DrnModel",
    "GammaDist",
    "GammaGlmModel",
    "MlpParams",
    "Partition",
    "PenaltyWeights",
    "RefinedDistribution",
    "Tensor",
    "TrainLog",
    "TrainingConfig",
    "drn_forward",
    "fit_gamma_glm",
    "init_mlp",
    "merge_cutpoints",
    "mlp_forward",
    "refinement_bounds",
    "uniform_cutpoints",
]

__version__ = "0.1.0"
