"""Gaussian process regression as linear-time state-space inference."""
from .exact import ExactPosterior, FactorizationError, exact_loglik, exact_posterior
from .kalman import (DivergenceError, Mode, OptimizationError, Ordering, PosteriorResult, RegressionDataset,
                     build_model, filter_loglik, one_step_ahead, posterior_at_data, predict_at,
                     train_hyperparameters)
from .kernels import Family, KernelSpec, KernelValidationError, NoiseSpec, eval_kernel, gram_matrix
from .spectral import ConditioningError, factor_spectrum, taylor_inverse_spectrum
from .ssm import Lssm, StateDimensionError, StepCache, convert, convert_miso, discretize, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "ExactPosterior",
    "FactorizationError",
    "exact_loglik",
    "exact_posterior",
    "DivergenceError",
    "Mode",
    "OptimizationError",
    "Ordering",
    "PosteriorResult",
    "RegressionDataset",
    "build_model",
    "filter_loglik",
    "one_step_ahead",
    "posterior_at_data",
    "predict_at",
    "train_hyperparameters",
    "Family",
    "KernelSpec",
    "KernelValidationError",
    "NoiseSpec",
    "eval_kernel",
    "gram_matrix",
    "ConditioningError",
    "factor_spectrum",
    "taylor_inverse_spectrum",
    "Lssm",
    "StateDimensionError",
    "StepCache",
    "convert",
    "convert_miso",
    "discretize",
    "load_model",
    "save_model",
]
