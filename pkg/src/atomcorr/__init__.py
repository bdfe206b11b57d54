"""Simulation and correlation analysis of single-atom detection experiments.

Quantum-statistical sources (chaotic bosons, ideal fermions, collision
halos), a time-of-flight detector model and a pair correlator with
mixed-event normalisation and Gaussian peak fits.
"""

__version__ = "0.1.0"

from ._validation import ConfigurationError, DataError
from .config import RunConfig, load_config, parse_config
from .core import (
    DetectorConfig,
    PhysicalConstants,
    Shot,
    SourceGeometry,
    SpeciesTag,
    Statistics,
    TofConfig,
    TrapSource,
    correlation_length,
)
from .correlator import (
    GaussianPeakFitter,
    HistogramSpec,
    PairCorrelator,
    fit_gaussian_peak,
    fit_pair_excess,
    normalize,
    pair_histogram,
)
from .detector import IdealAtoms, apply_detector, propagate_to_detector
from .halo import HaloConfig, sample_halo_shot, shell_radius
from .pipeline import correlate_shots, simulate
from .rng import shot_stream
from .sources import build_far_field, build_occupation_spectrum, sample_boson_shot, sample_fermion_shot

__all__ = [
    "ConfigurationError",
    "DataError",
    "DetectorConfig",
    "GaussianPeakFitter",
    "HaloConfig",
    "HistogramSpec",
    "IdealAtoms",
    "PairCorrelator",
    "PhysicalConstants",
    "RunConfig",
    "Shot",
    "SourceGeometry",
    "SpeciesTag",
    "Statistics",
    "TofConfig",
    "TrapSource",
    "apply_detector",
    "build_far_field",
    "build_occupation_spectrum",
    "correlate_shots",
    "correlation_length",
    "fit_gaussian_peak",
    "fit_pair_excess",
    "load_config",
    "normalize",
    "pair_histogram",
    "parse_config",
    "propagate_to_detector",
    "sample_boson_shot",
    "sample_fermion_shot",
    "sample_halo_shot",
    "shell_radius",
    "shot_stream",
    "simulate",
]
