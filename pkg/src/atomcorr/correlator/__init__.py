"""Pair counting, event-mixing normalisation and peak fitting."""

from .estimator import PairCorrelator
from .fitting import GaussianFit, GaussianPeakFitter, fit_gaussian_peak, fit_pair_excess, signal_to_noise
from .histogram import (
    CorrelationResult,
    HistogramSpec,
    NormalizationError,
    PairHistogram,
    normalize,
    pair_histogram,
    pair_histogram_fast,
    pair_histogram_naive,
)

__all__ = [
    "CorrelationResult",
    "GaussianFit",
    "GaussianPeakFitter",
    "HistogramSpec",
    "NormalizationError",
    "PairCorrelator",
    "PairHistogram",
    "fit_gaussian_peak",
    "fit_pair_excess",
    "normalize",
    "pair_histogram",
    "pair_histogram_fast",
    "pair_histogram_naive",
    "signal_to_noise",
]
