"""Pair histograms with event-mixing normalisation.

Two counting engines produce bit-identical integer histograms:

* :func:`pair_histogram_naive` enumerates every pair.
* :func:`pair_histogram_fast` finds candidate partners with a sorted sweep
  along one windowed axis plus integer cell lists on up to two more, then
  hands the candidates to the *same* exact coordinate/window/binning code.

Pair orientation is canonical: inside a shot the first member is the event
with the lower index in the time-sorted shot, across shots it is the event
from the reference shot.  Separation coordinates are ``second - first``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .._validation import ConfigurationError, check_shots

__all__ = [
    "HistogramSpec",
    "PairHistogram",
    "CorrelationResult",
    "pair_histogram",
    "pair_histogram_naive",
    "pair_histogram_fast",
    "normalize",
    "NormalizationError",
]

DIFFERENCE = "difference"
SUM = "sum"
_BINNABLE = {DIFFERENCE: ("x", "y", "z"), SUM: ("x", "y", "z", "r")}
_WINDOWABLE = {DIFFERENCE: ("x", "y", "z"), SUM: ("x", "y", "z", "r", "tan")}
_CHUNK = 1 << 21


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class HistogramSpec:
    """Binning and windows for pair coordinates.

    ``coordinates='difference'`` bins ``second - first`` along x, y and the
    longitudinal axis ``z`` (``z_equiv``, or the raw arrival time when
    ``longitudinal='t'``).  ``coordinates='sum'`` bins
    ``(r1 - center) + (r2 - center)``; there ``r`` is the sum projected on
    the pair axis and ``tan`` its transverse magnitude (window only).

    Each binned axis spans ``[-half_range, half_range]``.  ``window`` maps
    coordinate names to cuts ``|value| <= w``; binned axes default to their
    half range.
    """

    axes: tuple = ("x", "y", "z")
    half_range: tuple = (1e-3, 1e-3, 1e-3)
    bin_width: tuple = (1e-4, 1e-4, 1e-4)
    window: tuple = ()
    coordinates: str = DIFFERENCE
    longitudinal: str = "z"
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        axes = tuple(self.axes)
        if self.coordinates not in _BINNABLE:
            raise ConfigurationError(f"coordinates must be 'difference' or 'sum', got {self.coordinates!r}")
        if self.longitudinal not in ("z", "t"):
            raise ConfigurationError(f"longitudinal must be 'z' or 't', got {self.longitudinal!r}")
        if self.coordinates == SUM and self.longitudinal == "t":
            raise ConfigurationError("sum coordinates are defined on z_equiv only")
        if not axes or len(set(axes)) != len(axes):
            raise ConfigurationError("axes must be a non-empty list of distinct names")
        for a in axes:
            if a not in _BINNABLE[self.coordinates]:
                raise ConfigurationError(f"axis {a!r} cannot be binned in {self.coordinates} coordinates")
        hr = _per_axis(self.half_range, len(axes), "half_range")
        bw = _per_axis(self.bin_width, len(axes), "bin_width")
        win = dict(self.window.items() if isinstance(self.window, dict) else self.window)
        for k, v in win.items():
            if k not in _WINDOWABLE[self.coordinates]:
                raise ConfigurationError(f"window on unknown coordinate {k!r}")
            if not float(v) > 0:
                raise ConfigurationError(f"window {k!r} must be positive")
        for a, h in zip(axes, hr):
            w = float(win.setdefault(a, h))
            if w < h * (1 - 1e-12):
                raise ConfigurationError(f"window for {a!r} ({w:g}) is narrower than its range ({h:g})")
        center = tuple(float(c) for c in self.center)
        if len(center) != 3:
            raise ConfigurationError("center needs three components")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "half_range", hr)
        object.__setattr__(self, "bin_width", bw)
        object.__setattr__(self, "window", tuple(sorted((k, float(v)) for k, v in win.items())))
        object.__setattr__(self, "center", center)

    @property
    def windows(self):
        return dict(self.window)

    @property
    def n_bins(self):
        return tuple(max(1, int(round(2 * h / w))) for h, w in zip(self.half_range, self.bin_width))

    @property
    def shape(self):
        return self.n_bins

    def edges(self):
        return [np.linspace(-h, h, n + 1) for h, n in zip(self.half_range, self.n_bins)]

    def centers(self):
        return [0.5 * (e[1:] + e[:-1]) for e in self.edges()]

    @property
    def fold_axes(self):
        """Axes that flip sign when the two members of a pair are exchanged."""
        if self.coordinates == DIFFERENCE:
            return tuple(range(len(self.axes)))
        return tuple(i for i, a in enumerate(self.axes) if a == "r")

    def to_dict(self):
        return {
            "axes": list(self.axes),
            "half_range": list(self.half_range),
            "bin_width": list(self.bin_width),
            "window": dict(self.window),
            "coordinates": self.coordinates,
            "longitudinal": self.longitudinal,
            "center": list(self.center),
        }


def _per_axis(value, n, name):
    if np.isscalar(value):
        value = (value,) * n
    out = tuple(float(v) for v in value)
    if len(out) != n:
        raise ConfigurationError(f"{name} needs one value per binned axis")
    if any(not (v > 0 and math.isfinite(v)) for v in out):
        raise ConfigurationError(f"{name} values must be finite and positive")
    return out


@dataclass
class PairHistogram:
    spec: HistogramSpec
    same_shot_counts: np.ndarray
    mixed_counts: np.ndarray
    n_shots: int = 0
    n_events_total: int = 0

    def __add__(self, other):
        if other.spec != self.spec:
            raise ValueError("cannot merge histograms with different specs")
        return PairHistogram(
            self.spec,
            self.same_shot_counts + other.same_shot_counts,
            self.mixed_counts + other.mixed_counts,
            self.n_shots + other.n_shots,
            self.n_events_total + other.n_events_total,
        )

    @property
    def bin_centers(self):
        return self.spec.centers()

    def folded(self):
        """Counts with ``value`` and ``-value`` bins merged along exchange-odd axes."""
        axes = self.spec.fold_axes
        if not axes:
            return self.same_shot_counts.copy(), self.mixed_counts.copy()
        return (
            self.same_shot_counts + np.flip(self.same_shot_counts, axis=axes),
            self.mixed_counts + np.flip(self.mixed_counts, axis=axes),
        )


@dataclass
class CorrelationResult:
    spec: HistogramSpec
    g2: np.ndarray
    error: np.ndarray
    valid: np.ndarray
    same: np.ndarray
    mixed: np.ndarray
    fit: object = None
    meta: dict = field(default_factory=dict)

    @property
    def bin_centers(self):
        return self.spec.centers()

    def points(self):
        """(n_bins, n_axes) array of bin-centre coordinates, C order."""
        grids = np.meshgrid(*self.spec.centers(), indexing="ij")
        return np.column_stack([g.ravel() for g in grids])


# --------------------------------------------------------------------------
# exact per-pair evaluation shared by both engines


def _event_columns(shot, spec):
    lon = shot.t if spec.longitudinal == "t" else shot.z_equiv
    return np.column_stack([shot.x, shot.y, lon])


def _accumulate(spec, A, B, ia, ib, out):
    """Add pairs ``(A[ia], B[ib])`` to the flat histogram ``out`` in place."""
    if ia.size == 0:
        return
    win = spec.windows
    mask = np.ones(ia.size, dtype=bool)
    vals = {}
    if spec.coordinates == DIFFERENCE:
        for k, name in enumerate("xyz"):
            if name in win:
                v = B[ib, k] - A[ia, k]
                mask &= np.abs(v) <= win[name]
                vals[name] = v
    else:
        c = spec.center
        need_r = "r" in win or "tan" in win
        for k, name in enumerate("xyz"):
            if name in win or need_r:
                v = (A[ia, k] - c[k]) + (B[ib, k] - c[k])
                if name in win:
                    mask &= np.abs(v) <= win[name]
                vals[name] = v
        if need_r:
            d = A[ia] - B[ib]
            dn = np.sqrt(np.einsum("ij,ij->i", d, d))
            safe = np.where(dn > 0, dn, 1.0)
            sr = (vals["x"] * d[:, 0] + vals["y"] * d[:, 1] + vals["z"] * d[:, 2]) / safe
            sr = np.where(dn > 0, sr, 0.0)
            s2 = vals["x"] ** 2 + vals["y"] ** 2 + vals["z"] ** 2
            vals["r"] = sr
            vals["tan"] = np.sqrt(np.maximum(s2 - sr * sr, 0.0))
            for name in ("r", "tan"):
                if name in win:
                    mask &= np.abs(vals[name]) <= win[name]
    flat = np.zeros(ia.size, dtype=np.int64)
    for name, h, n in zip(spec.axes, spec.half_range, spec.n_bins):
        idx = np.floor((vals[name] + h) * (n / (2.0 * h)))
        mask &= (idx >= 0) & (idx < n)
        flat = flat * n + np.where(mask, idx, 0).astype(np.int64)
    out += np.bincount(flat[mask], minlength=out.size)


def _expand(starts, counts):
    """Concatenate ``range(s, s + c)`` for each start/count pair."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    offs = np.repeat(np.cumsum(counts) - counts, counts)
    return np.repeat(starts, counts) + (np.arange(total, dtype=np.int64) - offs)


# --------------------------------------------------------------------------
# naive engine


def _naive_same(spec, A, out):
    n = len(A)
    rows_per_chunk = max(1, _CHUNK // max(n, 1))
    for r0 in range(0, n - 1, rows_per_chunk):
        rows = np.arange(r0, min(n - 1, r0 + rows_per_chunk), dtype=np.int64)
        counts = n - 1 - rows
        ia = np.repeat(rows, counts)
        ib = _expand(rows + 1, counts)
        _accumulate(spec, A, A, ia, ib, out)


def _naive_cross(spec, A, B, out):
    na, nb = len(A), len(B)
    if na == 0 or nb == 0:
        return
    rows_per_chunk = max(1, _CHUNK // nb)
    for r0 in range(0, na, rows_per_chunk):
        rows = np.arange(r0, min(na, r0 + rows_per_chunk), dtype=np.int64)
        ia = np.repeat(rows, nb)
        ib = np.tile(np.arange(nb, dtype=np.int64), rows.size)
        _accumulate(spec, A, B, ia, ib, out)


# --------------------------------------------------------------------------
# fast engine


def _prefilter_axes(spec):
    """Cartesian windows usable for candidate search: list of (column, width)."""
    win = spec.windows
    found = [(k, win[name]) for k, name in enumerate("xyz") if name in win]
    # sweep along the longitudinal axis when it is windowed: events arrive sorted in it
    found.sort(key=lambda kw: 0 if kw[0] == 2 else 1)
    return found


def _query_values(spec, Aq, col):
    if spec.coordinates == DIFFERENCE:
        return Aq[:, col]
    c = spec.center[col]
    return (c - Aq[:, col]) + c


def _fast_pairs(spec, A, B, same, out):
    """Candidate search between queries ``A`` and partners ``B``, then exact binning."""
    na, nb = len(A), len(B)
    if na == 0 or nb == 0:
        return
    axes = _prefilter_axes(spec)
    if not axes:
        if same:
            _naive_same(spec, A, out)
        else:
            _naive_cross(spec, A, B, out)
        return

    scale = {}
    for col, w in axes:
        mag = max(np.abs(A[:, col]).max(), np.abs(B[:, col]).max(), abs(spec.center[col]))
        scale[col] = w + 1e-9 * (w + 2.0 * mag) + 1e-300
    sweep_col = axes[0][0]
    cell_cols = [col for col, _ in axes[1:3]]

    sv = B[:, sweep_col]
    order = np.argsort(sv, kind="stable")
    sorted_sv = sv[order]
    rank = np.empty(nb, dtype=np.int64)
    rank[order] = np.arange(nb, dtype=np.int64)

    # integer cell keys; drop cell axes that would overflow the composite key
    while True:
        pc = [np.floor(B[:, c] / scale[c]).astype(np.int64) for c in cell_cols]
        mins = [p.min() for p in pc]
        spans = [int(p.max() - m + 1) for p, m in zip(pc, mins)]
        if math.prod(spans) * (nb + 1) < (1 << 62):
            break
        cell_cols = cell_cols[:-1]
    strides = [math.prod(spans[i + 1:]) for i in range(len(spans))]
    key = np.zeros(nb, dtype=np.int64)
    for p, m, s in zip(pc, mins, strides):
        key += (p - m) * s
    comp = key * nb + rank
    perm = np.argsort(comp, kind="stable")
    comp_sorted = comp[perm]

    qs = _query_values(spec, A, sweep_col)
    lo_rank = np.searchsorted(sorted_sv, qs - scale[sweep_col], side="left").astype(np.int64)
    hi_rank = np.searchsorted(sorted_sv, qs + scale[sweep_col], side="right").astype(np.int64)
    qcell = [np.floor(_query_values(spec, A, c) / scale[c]).astype(np.int64) for c in cell_cols]
    qidx = np.arange(na, dtype=np.int64)

    for offset in itertools.product((-1, 0, 1), repeat=len(cell_cols)):
        valid = np.ones(na, dtype=bool)
        tkey = np.zeros(na, dtype=np.int64)
        for q, o, m, span, s in zip(qcell, offset, mins, spans, strides):
            tc = q + o - m
            valid &= (tc >= 0) & (tc < span)
            tkey += np.clip(tc, 0, span - 1) * s
        lo = np.searchsorted(comp_sorted, tkey * nb + lo_rank, side="left")
        hi = np.searchsorted(comp_sorted, tkey * nb + hi_rank, side="left")
        counts = np.where(valid, hi - lo, 0).astype(np.int64)
        if not counts.any():
            continue
        # bounded memory: process queries in slices
        csum = np.cumsum(counts)
        start = 0
        while start < na:
            base = csum[start - 1] if start else 0
            stop = int(np.searchsorted(csum, base + _CHUNK, side="right"))
            stop = max(stop, start + 1)
            c = counts[start:stop]
            ia = np.repeat(qidx[start:stop], c)
            ib = perm[_expand(lo[start:stop].astype(np.int64), c)]
            if same:
                keep = ib > ia
                ia, ib = ia[keep], ib[keep]
            _accumulate(spec, A, B, ia, ib, out)
            start = stop


# --------------------------------------------------------------------------
# drivers


def _partners(i, n_shots, mixing_factor):
    return [(i + k) % n_shots for k in range(1, min(mixing_factor, n_shots - 1) + 1)]


def _count_block(spec, cols, indices, engine, mixing_factor):
    size = math.prod(spec.shape)
    same = np.zeros(size, dtype=np.int64)
    mixed = np.zeros(size, dtype=np.int64)
    n = len(cols)
    for i in indices:
        A = cols[i]
        if engine == "naive":
            _naive_same(spec, A, same)
            for j in _partners(i, n, mixing_factor):
                _naive_cross(spec, A, cols[j], mixed)
        else:
            _fast_pairs(spec, A, A, True, same)
            for j in _partners(i, n, mixing_factor):
                _fast_pairs(spec, A, cols[j], False, mixed)
    return same, mixed


def pair_histogram(shots, spec, engine="fast", mixing_factor=4, n_jobs=1):
    """Same-shot and mixed-event pair counts.

    Mixed pairs join each shot with its ``mixing_factor`` successors
    (round-robin).  With ``n_jobs > 1`` shots are split into contiguous
    blocks whose integer partial histograms are summed, which is exactly
    equal to the sequential result.
    """
    if engine not in ("naive", "fast"):
        raise ConfigurationError(f"engine must be 'naive' or 'fast', got {engine!r}")
    if int(mixing_factor) < 1:
        raise ConfigurationError("mixing_factor must be >= 1")
    shots = check_shots(shots)
    cols = [_event_columns(s, spec) for s in shots]
    n = len(cols)
    if n_jobs is None or n_jobs == 1 or n < 2:
        same, mixed = _count_block(spec, cols, range(n), engine, mixing_factor)
    else:
        n_blocks = n if n_jobs < 0 else min(n, int(n_jobs))
        blocks = [b for b in np.array_split(np.arange(n), n_blocks) if b.size]
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_count_block)(spec, cols, b, engine, mixing_factor) for b in blocks
        )
        same = sum(p[0] for p in parts)
        mixed = sum(p[1] for p in parts)
    return PairHistogram(
        spec,
        same.reshape(spec.shape),
        mixed.reshape(spec.shape),
        n_shots=n,
        n_events_total=int(sum(len(c) for c in cols)),
    )


def pair_histogram_naive(shots, spec, mixing_factor=4, n_jobs=1):
    return pair_histogram(shots, spec, "naive", mixing_factor, n_jobs)


def pair_histogram_fast(shots, spec, mixing_factor=4, n_jobs=1):
    return pair_histogram(shots, spec, "fast", mixing_factor, n_jobs)


def normalize(hist):
    """Mixed-event normalised ``g2`` on the folded histogram.

    ``g2 = (same / sum(same)) / (mixed / sum(mixed))`` in every bin with a
    non-zero mixed count; other bins are flagged invalid and hold NaN.
    Errors propagate Poisson counting noise of both histograms.
    """
    same, mixed = hist.folded()
    same = same.astype(float)
    mixed = mixed.astype(float)
    m_tot = mixed.sum()
    if m_tot <= 0:
        raise NormalizationError("mixed-event histogram is empty; cannot normalise")
    s_tot = same.sum()
    valid = mixed > 0
    g2 = np.full(same.shape, np.nan)
    err = np.full(same.shape, np.nan)
    if s_tot > 0:
        scale = m_tot / s_tot
        g2[valid] = same[valid] / mixed[valid] * scale
        err[valid] = scale * np.sqrt(np.maximum(same[valid], 1.0)) / mixed[valid]
        err[valid] = np.sqrt(err[valid] ** 2 + (g2[valid] ** 2) / mixed[valid])
    else:
        g2[valid] = 0.0
        err[valid] = m_tot / mixed[valid]
    return CorrelationResult(hist.spec, g2, err, valid, same, mixed)
