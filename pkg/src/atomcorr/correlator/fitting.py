"""Gaussian peak fits of correlation functions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import erf
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

__all__ = ["GaussianFit", "GaussianPeakFitter", "fit_gaussian_peak", "fit_pair_excess", "signal_to_noise"]

MIN_MIXED_COUNTS = 10


@dataclass
class GaussianFit:
    """``offset + amplitude * exp(-sum_i x_i**2 / widths_i**2)``.

    ``converged`` is False for a failed fit; ``message`` then says why.
    """

    amplitude: float
    widths: tuple
    offset: float
    reduced_chi2: float
    converged: bool = True
    n_iter: int = 0
    message: str = ""
    stderr: dict = field(default_factory=dict)
    axes: tuple = ()
    n_points: int = 0

    @property
    def g2_zero(self):
        return self.offset + self.amplitude

    @property
    def contrast(self):
        """Peak height relative to the fitted baseline."""
        return self.amplitude / self.offset if self.offset else np.nan

    def to_dict(self):
        return {
            "axes": list(self.axes),
            "amplitude": self.amplitude,
            "widths": list(self.widths),
            "offset": self.offset,
            "g2_zero": self.g2_zero,
            "reduced_chi2": self.reduced_chi2,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "n_points": self.n_points,
            "message": self.message,
            "stderr": dict(self.stderr),
        }


def _profile(x, w, b):
    """Mean of ``exp(-u**2 / w**2)`` over ``[x - b/2, x + b/2]`` and its d/dlog(w)."""
    if b is None or b <= 0:
        f = np.exp(-((x / w) ** 2))
        return f, 2.0 * (x / w) ** 2 * f
    lo, hi = (x - 0.5 * b) / w, (x + 0.5 * b) / w
    f = (np.sqrt(np.pi) * w / (2.0 * b)) * (erf(hi) - erf(lo))
    df = f + (w / b) * (lo * np.exp(-lo * lo) - hi * np.exp(-hi * hi))
    return f, df


def _peak(X, widths, bins):
    cols = [_profile(X[:, i], widths[i], None if bins is None else bins[i]) for i in range(X.shape[1])]
    f = np.prod([c[0] for c in cols], axis=0)
    return f, cols


class GaussianPeakFitter(RegressorMixin, BaseEstimator):
    """Weighted least-squares fit of a centred Gaussian peak on a baseline.

    Initialisation is deterministic: the offset is the median of the outer
    20 % of points (by scaled radius), the amplitude is the mean value at the
    innermost points minus the offset, and each width comes from the second
    moment of ``|y - offset|``.  With ``bin_widths`` the model is averaged
    over each histogram bin instead of evaluated at its centre.  Passing a
    ``baseline`` array to ``fit`` makes the background ``offset * baseline``
    instead of a constant.

    Minimisation is Levenberg-Marquardt with at most ``max_iter`` evaluations
    and relative tolerance ``tol``; widths are optimised in log space so they
    stay positive.

    Parameters
    ----------
    fit_offset : bool
        When False the baseline is held at ``offset_value``.
    offset_value : float
        Fixed baseline used when ``fit_offset`` is False.
    max_iter : int
    tol : float
    bin_widths : sequence of float, optional
        Bin width per axis for bin-averaged evaluation.
    """

    def __init__(self, fit_offset=True, offset_value=0.0, max_iter=200, tol=1e-10, bin_widths=None):
        self.fit_offset = fit_offset
        self.offset_value = offset_value
        self.max_iter = max_iter
        self.tol = tol
        self.bin_widths = bin_widths

    def _initial(self, X, y, base):
        scale = np.abs(X).max(axis=0)
        scale[scale == 0] = 1.0
        radius = np.sqrt(np.sum((X / scale) ** 2, axis=1))
        outer = radius >= np.quantile(radius, 0.8)
        if not self.fit_offset:
            off = float(self.offset_value)
        elif np.all(base == 1.0):
            off = float(np.median(y[outer]))
        else:
            off = float(y[outer].sum() / base[outer].sum()) if base[outer].sum() > 0 else 0.0
        inner = radius <= radius.min() * (1 + 1e-9) + 1e-300
        amp = float(np.mean(y[inner] - off * base[inner]))
        wgt = np.abs(y - off * base)
        if wgt.sum() <= 0:
            wgt = np.ones_like(y)
        widths = np.sqrt(2.0 * (wgt[:, None] * X**2).sum(axis=0) / wgt.sum())
        spacing = np.array([np.min(np.diff(np.unique(c))) if np.unique(c).size > 1 else 1.0 for c in X.T])
        widths = np.clip(widths, spacing, None)
        if amp == 0:
            amp = 1e-3
        return off, amp, widths

    def fit(self, X, y, sample_weight=None, baseline=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float).ravel()
        if len(y) != len(X):
            raise ValueError("X and y have inconsistent lengths")
        base = np.ones_like(y) if baseline is None else np.asarray(baseline, dtype=float).ravel()
        if base.shape != y.shape:
            raise ValueError("baseline must have one entry per point")
        w = np.ones_like(y) if sample_weight is None else np.sqrt(np.asarray(sample_weight, float))
        n_axes = X.shape[1]
        off0, amp0, w0 = self._initial(X, y, base)
        fix = not self.fit_offset
        bins = None if self.bin_widths is None else np.broadcast_to(
            np.asarray(self.bin_widths, float), (n_axes,))

        def unpack(p):
            if fix:
                return float(self.offset_value), p[0], np.exp(p[1:])
            return p[0], p[1], np.exp(p[2:])

        def resid(p):
            off, amp, widths = unpack(p)
            return w * (off * base + amp * _peak(X, widths, bins)[0] - y)

        def jac(p):
            off, amp, widths = unpack(p)
            e, parts = _peak(X, widths, bins)
            cols = [] if fix else [base]
            cols.append(e)
            for i in range(n_axes):
                others = np.prod([parts[j][0] for j in range(n_axes) if j != i], axis=0)
                cols.append(amp * others * parts[i][1])
            return w[:, None] * np.column_stack(cols)

        p0 = np.concatenate([[amp0] if fix else [off0, amp0], np.log(w0)])
        n_par = p0.size
        if len(y) <= n_par:
            raise ValueError("not enough points to fit the peak")
        sol = least_squares(
            resid, p0, jac=jac, method="lm", xtol=self.tol, ftol=self.tol, gtol=self.tol,
            max_nfev=self.max_iter,
        )
        off, amp, widths = unpack(sol.x)
        dof = max(len(y) - n_par, 1)
        chi2 = float(np.sum(sol.fun**2) / dof)
        try:
            cov = np.linalg.inv(sol.jac.T @ sol.jac) * chi2
            perr = np.sqrt(np.clip(np.diag(cov), 0, None))
        except np.linalg.LinAlgError:
            perr = np.full(n_par, np.nan)
        names = ([] if fix else ["offset"]) + ["amplitude"] + [f"width_{i}" for i in range(n_axes)]
        stderr = {}
        for name, val, e in zip(names, sol.x, perr):
            # log-width errors map to relative errors on the width
            stderr[name] = float(e * np.exp(val)) if name.startswith("width") else float(e)
        self.offset_ = float(off)
        self.amplitude_ = float(amp)
        self.widths_ = np.asarray(widths, dtype=float)
        self.reduced_chi2_ = chi2
        self.converged_ = bool(sol.status > 0 and np.all(np.isfinite(sol.x)))
        self.n_iter_ = int(sol.nfev)
        self.message_ = sol.message
        self.stderr_ = stderr
        self.n_features_in_ = n_axes
        self._bins = bins
        return self

    def predict(self, X, baseline=None):
        check_is_fitted(self, "amplitude_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        base = 1.0 if baseline is None else np.asarray(baseline, dtype=float).ravel()
        return self.offset_ * base + self.amplitude_ * _peak(X, self.widths_, self._bins)[0]


def _fit_inputs(result, min_mixed=MIN_MIXED_COUNTS):
    X = result.points()
    y = result.g2.ravel()
    err = result.error.ravel()
    use = result.valid.ravel() & (result.mixed.ravel() >= min_mixed) & np.isfinite(err) & (err > 0)
    return X[use], y[use], err[use]


def _bin_widths(spec):
    return tuple(2.0 * h / n for h, n in zip(spec.half_range, spec.n_bins))


def fit_gaussian_peak(result, fitter=None, min_mixed=MIN_MIXED_COUNTS):
    """Fit a centred Gaussian peak to a normalised correlation result.

    Bins with fewer than ``min_mixed`` mixed pairs are ignored and the model
    is averaged over each bin.  Returns a
    :class:`GaussianFit` (also stored on ``result.fit``); a fit that does
    not converge comes back with ``converged=False`` and diagnostics in
    ``message`` rather than raising.
    """
    X, y, err = _fit_inputs(result, min_mixed)
    fitter = fitter if fitter is not None else GaussianPeakFitter(bin_widths=_bin_widths(result.spec))
    try:
        for i, name in enumerate(result.spec.axes):
            if np.unique(X[:, i]).size < 5:
                raise ValueError(f"fewer than 5 usable bins along axis {name!r}")
        fitter.fit(X, y, sample_weight=1.0 / err**2)
    except (ValueError, np.linalg.LinAlgError) as exc:
        fit = GaussianFit(
            np.nan, (np.nan,) * X.shape[1], np.nan, np.nan, converged=False,
            message=f"fit failed: {exc}", axes=result.spec.axes, n_points=len(y),
        )
    else:
        fit = GaussianFit(
            fitter.amplitude_, tuple(fitter.widths_), fitter.offset_, fitter.reduced_chi2_,
            converged=fitter.converged_, n_iter=fitter.n_iter_, message=fitter.message_,
            stderr=fitter.stderr_, axes=result.spec.axes, n_points=len(y),
        )
    result.fit = fit
    return fit


def fit_pair_excess(hist, fitter=None):
    """Fit raw same-shot counts as mixed-event background plus a Gaussian.

    The model is ``offset * m + amplitude * exp(-sum_i x_i**2 / w_i**2)``
    where ``m`` is the mixed histogram rescaled to the same-shot total, so
    ``offset`` is the background share and ``amplitude`` a pair count per
    bin.  Unlike the ratio ``g2``, the recovered widths are those of the
    correlated pair distribution even when the uncorrelated pair density
    varies on the scale of the peak (thin shells, for example).  Weights are
    Poisson, ``1 / max(count, 1)``; counts are folded like in
    :func:`normalize`.

    When the background has the same shape as the peak the two cannot be
    told apart; pass ``GaussianPeakFitter(fit_offset=False, ...)`` to pin
    the background share instead.
    """
    spec = hist.spec
    same, mixed = hist.folded()
    same = same.ravel().astype(float)
    mixed = mixed.ravel().astype(float)
    if mixed.sum() == 0 or same.sum() == 0:
        raise ValueError("pair excess fit needs non-empty same-shot and mixed histograms")
    base = mixed * (same.sum() / mixed.sum())
    grids = np.meshgrid(*spec.centers(), indexing="ij")
    X = np.column_stack([g.ravel() for g in grids])
    fitter = fitter if fitter is not None else GaussianPeakFitter(bin_widths=_bin_widths(spec))
    try:
        fitter.fit(X, same, sample_weight=1.0 / np.maximum(same, 1.0), baseline=base)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return GaussianFit(
            np.nan, (np.nan,) * X.shape[1], np.nan, np.nan, converged=False,
            message=f"fit failed: {exc}", axes=spec.axes, n_points=len(same),
        )
    return GaussianFit(
        fitter.amplitude_, tuple(fitter.widths_), fitter.offset_, fitter.reduced_chi2_,
        converged=fitter.converged_, n_iter=fitter.n_iter_, message=fitter.message_,
        stderr=fitter.stderr_, axes=spec.axes, n_points=len(same),
    )


def signal_to_noise(result, fit, min_mixed=MIN_MIXED_COUNTS):
    """``|amplitude|`` over the RMS scatter of baseline bins about the offset.

    Baseline bins are those where the fitted peak has dropped below 1 % of
    its height; if there are none the outer 20 % of bins are used.
    """
    if fit.amplitude == 0:
        return 0.0
    X, y, _ = _fit_inputs(result, min_mixed)
    peak = np.exp(-np.sum((X / np.asarray(fit.widths)) ** 2, axis=1))
    base = peak < 0.01
    if base.sum() < 2:
        r = np.sqrt(np.sum((X / np.abs(X).max(axis=0)) ** 2, axis=1))
        base = r >= np.quantile(r, 0.8)
    rms = float(np.sqrt(np.mean((y[base] - fit.offset) ** 2)))
    return abs(fit.amplitude) / rms if rms > 0 else np.inf
