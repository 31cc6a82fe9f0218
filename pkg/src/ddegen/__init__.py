"""Denoising density estimators (DDEs) and generators trained against them."""

from .datasets import Dataset, MixtureSpec, load_csv, make_synthetic
from .dde import (AnalyticEnergy, DdeModel, DdeTrainConfig, LrDecay, denoise, dde_loss, gaussian_energy,
                  load_dde, mixture_energy, save_dde, train_dde)
from .errors import ConfigError, ContractError, DdeError, EstimationError, ModelKindError, NumericError, ParseError
from .evaluation import avg_log_likelihood, density_grid, estimate_log_partition, mode_coverage
from .generator import GaussianTarget, GenTrainConfig, GeneratorModel, load_generator, train_generator
from .network import MlpConfig, init_mlp
from .samplers import AldConfig, sample_ald, sample_direct

__version__ = "0.1.0"

__all__ = [
    "Dataset", "MixtureSpec", "load_csv", "make_synthetic",
    "AnalyticEnergy", "DdeModel", "DdeTrainConfig", "LrDecay", "denoise", "dde_loss", "gaussian_energy",
    "load_dde", "mixture_energy", "save_dde", "train_dde",
    "ConfigError", "ContractError", "DdeError", "EstimationError", "ModelKindError", "NumericError", "ParseError",
    "avg_log_likelihood", "density_grid", "estimate_log_partition", "mode_coverage",
    "GaussianTarget", "GenTrainConfig", "GeneratorModel", "load_generator", "train_generator",
    "MlpConfig", "init_mlp",
    "AldConfig", "sample_ald", "sample_direct",
]
