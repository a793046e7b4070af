"""Gaussian mixture density estimation from observations with known
heteroscedastic Gaussian noise, by batch EM, online minibatch EM, or
minibatch gradient descent."""

from .core import (
    DegenerateComponentError,
    GmmParams,
    NoisyPoint,
    NonFiniteError,
    NotPositiveDefiniteError,
    SuffStatAccumulator,
    UnconstrainedParams,
    XDError,
    constrain,
    load_checkpoint,
    save_checkpoint,
    unconstrain,
)
from .data import Dataset, Schema, generate_synthetic, load_csv, sample_model, split, write_csv
from .em import EmConfig, fit_em
from .init import kmeans_init
from .likelihood import e_step, log_likelihood, mean_log_likelihood
from .report import FitReport
from .sgd import SgdConfig, fit_sgd

__version__ = "0.1.0"

__all__ = [
    "DegenerateComponentError",
    "GmmParams",
    "NoisyPoint",
    "NonFiniteError",
    "NotPositiveDefiniteError",
    "SuffStatAccumulator",
    "UnconstrainedParams",
    "XDError",
    "constrain",
    "load_checkpoint",
    "save_checkpoint",
    "unconstrain",
    "Dataset",
    "Schema",
    "generate_synthetic",
    "load_csv",
    "sample_model",
    "split",
    "write_csv",
    "EmConfig",
    "fit_em",
    "kmeans_init",
    "e_step",
    "log_likelihood",
    "mean_log_likelihood",
    "FitReport",
    "SgdConfig",
    "fit_sgd",
]
