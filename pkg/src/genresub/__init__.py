"""Generalized resubstitution error estimators for polynomial regression."""

from .core import Dataset, ExperimentScenario, NumericalError, generate_synthetic
from .estimators import ErrorEstimate
from .kernels import EmConfig, KernelSet
from .regression import PolynomialModel, fit_bayesian, fit_least_squares

__all__ = [
    "Dataset",
    "EmConfig",
    "ErrorEstimate",
    "ExperimentScenario",
    "KernelSet",
    "NumericalError",
    "PolynomialModel",
    "fit_bayesian",
    "fit_least_squares",
    "generate_synthetic",
]
__version__ = "0.1.0"
