from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .fitting import fit_gaussian_peak, signal_to_noise
from .histogram import HistogramSpec, normalize, pair_histogram


class PairCorrelator(BaseEstimator):
    """Second-order correlation of detected events, sklearn style.

    ``fit(shots)`` accumulates same-shot and mixed-event pair histograms,
    normalises them and (when ``fit_peak``) fits a Gaussian peak.

    Attributes set by ``fit``: ``histogram_``, ``result_``, ``fit_`` (or
    None) and ``snr_``.
    """

    def __init__(self, spec=None, engine="fast", mixing_factor=4, n_jobs=1, fit_peak=True, fitter=None):
        self.spec = spec
        self.engine = engine
        self.mixing_factor = mixing_factor
        self.n_jobs = n_jobs
        self.fit_peak = fit_peak
        self.fitter = fitter

    def fit(self, shots, y=None):
        spec = self.spec if self.spec is not None else HistogramSpec()
        self.histogram_ = pair_histogram(shots, spec, self.engine, self.mixing_factor, self.n_jobs)
        self.result_ = normalize(self.histogram_)
        self.fit_ = None
        self.snr_ = None
        if self.fit_peak:
            self.fit_ = fit_gaussian_peak(self.result_, self.fitter)
            if self.fit_.converged:
                self.snr_ = signal_to_noise(self.result_, self.fit_)
        return self

    def transform(self, shots):
        """Normalised ``g2`` array for ``shots`` using the fitted settings."""
        check_is_fitted(self, "result_")
        spec = self.spec if self.spec is not None else HistogramSpec()
        return normalize(pair_histogram(shots, spec, self.engine, self.mixing_factor, self.n_jobs)).g2
