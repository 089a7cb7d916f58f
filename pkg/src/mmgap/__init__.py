"""Mutual information from the gap between conditional and unconditional
denoising errors, with a from-scratch numpy denoiser."""
from .channel import SamplingConfig, add_noise, sample_log_snr
from .errors import ConfigError, DomainError, MMGError, NumericError
from .estimator import (AdaptiveFit, LinearGaussianDenoiser, MiEstimate, MmseCurve, estimate,
                        estimate_gap, estimate_orthogonal, fit_adaptive, mmse_curve,
                        pointwise_log_density, pointwise_mi)
from .numerics import MlpConfig, OptimizerConfig
from .tasks import (JointGaussianSpec, TaskSpec, gaussian_conditional_mmse, gaussian_mi,
                    gaussian_mmse, parse_task_name)
from .training import TrainConfig, TrainRun, profile_configs, train, two_stage_train

__version__ = "0.1.0"

__all__ = [
    "AdaptiveFit", "ConfigError", "DomainError", "JointGaussianSpec", "LinearGaussianDenoiser",
    "MMGError", "MiEstimate", "MlpConfig", "MmseCurve", "NumericError", "OptimizerConfig",
    "SamplingConfig", "TaskSpec", "TrainConfig", "TrainRun", "add_noise", "estimate",
    "estimate_gap", "estimate_orthogonal", "fit_adaptive", "gaussian_conditional_mmse",
    "gaussian_mi", "gaussian_mmse", "mmse_curve", "parse_task_name", "pointwise_log_density",
    "pointwise_mi", "profile_configs", "sample_log_snr", "train", "two_stage_train",
]
