"""Finite deep ResNets trained by GD and their joint depth-width limits."""
from .activations import ActivationSpec, linear, tanh
from .errors import (
    ContractViolationError,
    IllConditionedCovarianceError,
    InvalidConfigError,
    InvalidInputError,
    NonConvergenceError,
    NumericalOverflowError,
    ResNetLimitsError,
    UnderdeterminedFitError,
)
from .numerics import DistKind, Family, RngState, SGrid, rng_create
from .resnet import Dataset, HPConfig, ShapeConfig, train

__version__ = "0.1.0"
