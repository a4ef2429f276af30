"""Differentially private importance weighting of synthetic data."""

from . import bayes, core, estimator, metrics, pipeline, postprocess, privacy, ratio, synthgen
from .core import (
    ConvergenceError,
    Dataset,
    InfeasibleReleaseError,
    PrivacySpend,
    Provenance,
    RngStream,
    Source,
    WeightVector,
    compose_spends,
    minmax_scale,
    train_test_split,
)
from .estimator import effective_sample_size, importance_estimate
from .metrics import weighted_mmd2, weighted_wasserstein
from .postprocess import beta_calibrate, psis_smooth, temper

__version__ = "0.1.0"
