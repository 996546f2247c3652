from .analytic import AnalyticGaussianDenoiser
from .base import ConditionEmbedding, Denoiser, DenoiserError, Role
from .trained import (
    TrainedDenoiser,
    TrainingConfig,
    TrainingError,
    grad_wrt_condition,
    load_denoiser,
    save_denoiser,
    train_denoiser,
)

__all__ = [
    "AnalyticGaussianDenoiser",
    "ConditionEmbedding",
    "Denoiser",
    "DenoiserError",
    "Role",
    "TrainedDenoiser",
    "TrainingConfig",
    "TrainingError",
    "grad_wrt_condition",
    "load_denoiser",
    "save_denoiser",
    "train_denoiser",
]
