"""Augmented transfer regression learning under covariate shift.

Doubly robust estimation of a target-population working regression from
labelled source data and unlabelled target data, with semi-non-parametric
nuisance models, moment-calibrated nonparametric components, K-fold
cross-fitting, bootstrap intervals, comparator estimators, and a
simulation benchmark.
"""

from .estimator import (
    AtrelConfig,
    AtrelEstimate,
    LoadingEstimate,
    Tunings,
    bootstrap_ci,
    dr_residual_diagnostic,
    fit_atrel,
    kfold_partition,
)
from .exceptions import (
    AtrelError,
    CalibrationError,
    ConfigurationError,
    ConvergenceError,
    DomainError,
    GeneratorError,
    InferenceError,
    IngestionError,
    MetricError,
    NoRootError,
    StateError,
)
from .model import ModelSpec, NuisanceSpec, TransferDataset
from .numerics import (
    IDENTITY,
    LOGIT,
    BasisExpansion,
    BasisSpec,
    KernelSpec,
    LinkFunction,
    newton_solve,
    scalar_root,
)

__version__ = "0.1.0"
