"""Self-supervised dependence measure for pairs of time series.

A pair of convolutional encoders learns to tell temporally aligned segment
pairs from misaligned ones; held-out classification accuracy ``a`` maps to
the coefficient ``2 * max(a, 0.5) - 1``.
"""

from .evaluation import (
    DependenceReport,
    coefficient_from_accuracy,
    cross_validated_coefficient,
    permutation_test,
    pscs_trace,
    run_cv,
)
from .model import ConcurrenceModel, EncoderConfig, build_model, load_model, save_model
from .signals import DatasetError, Signal, SignalDataset, SignalPair, load_dataset, save_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConcurrenceModel", "DatasetError", "DependenceReport", "EncoderConfig", "Signal",
    "SignalDataset", "SignalPair", "TrainConfig", "build_model", "coefficient_from_accuracy",
    "cross_validated_coefficient", "load_dataset", "load_model", "permutation_test",
    "pscs_trace", "run_cv", "save_dataset", "save_model", "train",
]
