"""Per-shot atom configurations with exact quantum statistics.

Both samplers work in far-field (detector) coordinates on top of a Gaussian
Schell-model description of the expanded ideal gas: a Gaussian density
envelope of RMS width ``W_i`` per axis and a Gaussian first-order coherence
whose squared modulus is ``exp(-d_i**2 / l_i**2)``.

* Bosons: a chaotic field is synthesised by spectral filtering of complex
  white noise and atoms are drawn from the Cox process with intensity
  ``|field|**2`` times the envelope.  Alternatively (``method="modes"``) the
  field is built from complex Gaussian amplitudes of the Hermite-Gauss modes
  below, which is exact and free of the speckle grid's cell-scale
  discretisation.
* Fermions: the same kernel is written in its exact Hermite-Gauss mode
  expansion (Mehler's formula), modes are switched on with Bernoulli
  probabilities equal to their occupations, and the resulting projection
  DPP is sampled sequentially on a separable grid.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from ._validation import ConfigurationError, check_vector3
from .core import PhysicalConstants, Statistics, correlation_length
from .detector import POSITION, IdealAtoms

__all__ = [
    "FarFieldModel",
    "OccupationSpectrum",
    "build_far_field",
    "build_occupation_spectrum",
    "sample_boson_shot",
    "sample_fermion_shot",
    "reference_g2",
    "blurred_contrast",
    "fano_joint_probability",
    "FanoDemo",
    "sample_fano_shot",
    "hermite_functions",
    "ModeGrid",
]

MIN_CELLS_PER_LENGTH = 4.0
MAX_GRID_CELLS = 1 << 23
MAX_AXIS_CELLS = 4096


@dataclass(frozen=True)
class FarFieldModel:
    envelope_widths: tuple
    coherence_lengths: tuple
    mean_detected_atoms: float

    def __post_init__(self):
        W = check_vector3(self.envelope_widths, "envelope_widths", positive=True)
        lc = check_vector3(self.coherence_lengths, "coherence_lengths", positive=True)
        if any(l > w * (1 + 1e-12) for l, w in zip(lc, W)):
            raise ConfigurationError(
                "coherence length exceeds envelope width on some axis; the chaotic model needs l <= W"
            )
        if not self.mean_detected_atoms > 0:
            raise ConfigurationError("mean_detected_atoms must be positive")
        object.__setattr__(self, "envelope_widths", W)
        object.__setattr__(self, "coherence_lengths", lc)
        object.__setattr__(self, "mean_detected_atoms", float(self.mean_detected_atoms))


def build_far_field(source, tof, constants=None, envelope_widths=None):
    """Far-field envelope and coherence lengths for a trapped ideal gas.

    ``l_i = hbar t / (m s_i)``.  Unless ``envelope_widths`` overrides it, the
    ballistic width is set from the degeneracy proxy ``d`` so that
    ``W_i = max(s_i, l_i / d)``.
    """
    constants = constants or PhysicalConstants()
    mass = constants.mass(source.species.mass_ref)
    sizes = source.geometry.sizes
    lc = tuple(correlation_length(constants, mass, tof.fall_time, s) for s in sizes)
    if envelope_widths is None:
        W = tuple(max(s, l / source.degeneracy_parameter) for s, l in zip(sizes, lc))
    else:
        W = check_vector3(envelope_widths, "envelope_widths", positive=True)
    return FarFieldModel(W, lc, source.mean_atoms_per_shot)


@dataclass(frozen=True, eq=False)
class OccupationSpectrum:
    """Mean occupations of the Hermite-Gauss modes ``(n_x, n_y, n_z)``.

    ``mode_widths`` are the oscillator lengths of the mode functions and
    ``ratios`` the per-axis geometric factors; the occupation of mode ``n``
    is ``peak * prod_i ratios_i ** n_i``.
    """

    mode_counts: tuple
    occupations: np.ndarray
    mode_widths: tuple
    ratios: tuple
    statistics: Statistics

    @property
    def total(self):
        return float(self.occupations.sum())


def _mode_ratio(l, W):
    r2 = (l / W) ** 2
    return 0.5 * ((2.0 + r2) - math.sqrt(r2 * (r2 + 4.0)))


def build_occupation_spectrum(source, model):
    """Discrete mode occupations reproducing ``model``'s envelope and coherence.

    Uses Mehler's formula: a geometric occupation ``kappa**n`` of oscillator
    modes with length ``a`` gives a density of RMS ``W`` and coherence length
    ``l`` with ``l**2 / W**2 = (1 - kappa)**2 / kappa`` and
    ``a**2 = 2 W**2 (1 - kappa) / (1 + kappa)``.  Occupations are scaled so
    they sum to the model's mean atom number; for fermions this fails if the
    lowest mode would need an occupation above one.
    """
    return spectrum_from_model(model, source.mode_count_per_axis, source.species.statistics)


def spectrum_from_model(model, mode_counts, statistics):
    statistics = Statistics(statistics)
    ratios, widths, factors = [], [], []
    for l, W, M in zip(model.coherence_lengths, model.envelope_widths, mode_counts):
        kappa = _mode_ratio(l, W)
        ratios.append(kappa)
        widths.append(W * math.sqrt(2.0 * (1.0 - kappa) / (1.0 + kappa)))
        factors.append(kappa ** np.arange(M))
    shape = np.multiply.outer(np.multiply.outer(factors[0], factors[1]), factors[2])
    peak = model.mean_detected_atoms / shape.sum()
    if statistics is Statistics.FERMION and peak > 1.0 + 1e-12:
        raise ConfigurationError(
            f"{model.mean_detected_atoms:g} fermions need a ground-mode occupation of {peak:.3f} > 1; "
            "lower the atom number, raise mode_count_per_axis or lower degeneracy_parameter"
        )
    return OccupationSpectrum(
        tuple(int(m) for m in mode_counts), peak * shape, tuple(widths), tuple(ratios), statistics
    )


# --------------------------------------------------------------------------
# bosons


class _SpeckleGrid:
    def __init__(self, model, cells_per_length, extent):
        if cells_per_length < MIN_CELLS_PER_LENGTH:
            raise ConfigurationError(
                f"speckle grid needs >= {MIN_CELLS_PER_LENGTH:g} cells per coherence length, "
                f"got {cells_per_length:g}"
            )
        self.centers, self.cells, filters, envs = [], [], [], []
        for l, W in zip(model.coherence_lengths, model.envelope_widths):
            cell = l / cells_per_length
            n = int(math.ceil(extent * W / cell))
            n += n % 2
            if n > MAX_AXIS_CELLS:
                raise ConfigurationError(f"speckle grid axis would need {n} cells")
            c = (np.arange(n) - 0.5 * (n - 1)) * cell
            k = np.arange(n)
            lag = cell * np.minimum(k, n - k)
            spec = np.clip(np.fft.fft(np.exp(-(lag**2) / (2.0 * l * l))).real, 0.0, None)
            spec *= n / spec.sum()
            self.centers.append(c)
            self.cells.append(cell)
            filters.append(np.sqrt(spec))
            envs.append(np.exp(-(c**2) / (2.0 * W * W)))
        self.shape = tuple(len(c) for c in self.centers)
        if np.prod(self.shape) > MAX_GRID_CELLS:
            raise ConfigurationError(f"speckle grid {self.shape} exceeds {MAX_GRID_CELLS} cells")
        self.filter = filters[0][:, None, None] * filters[1][None, :, None] * filters[2][None, None, :]
        env = envs[0][:, None, None] * envs[1][None, :, None] * envs[2][None, None, :]
        self.envelope = env / env.sum()

    def field(self, rng):
        noise = rng.standard_normal(self.shape + (2,)).view(np.complex128)[..., 0]
        noise *= math.sqrt(0.5)
        return scipy.fft.ifftn(self.filter * scipy.fft.fftn(noise))

    def draw_cells(self, weights, rng):
        total = weights.sum()
        n = rng.poisson(total)
        cdf = np.cumsum(weights.ravel())
        flat = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        flat = np.minimum(flat, cdf.size - 1)
        return np.column_stack(np.unravel_index(flat, self.shape))

    def positions(self, idx, rng):
        out = np.empty((len(idx), 3))
        for a in range(3):
            out[:, a] = self.centers[a][idx[:, a]] + self.cells[a] * (rng.random(len(idx)) - 0.5)
        return out


@functools.lru_cache(maxsize=8)
def _speckle_grid(model, cells_per_length, extent):
    return _SpeckleGrid(model, cells_per_length, extent)


def boson_intensity(model, rng, cells_per_length=4.0, extent=6.0):
    """Expected atom number per grid cell for one chaotic realisation.

    Returns ``(grid, weights)``; ``weights`` sums to ``mean_detected_atoms``
    on average over realisations.
    """
    grid = _speckle_grid(model, float(cells_per_length), float(extent))
    f = grid.field(rng)
    intensity = f.real**2 + f.imag**2
    return grid, model.mean_detected_atoms * grid.envelope * intensity


def sample_boson_shot(
    model, rng, shot_id=0, cells_per_length=4.0, extent=6.0, method="spectral", mode_counts=(24, 24, 24)
):
    """Chaotic (permanental) bosons for one shot as far-field positions.

    ``method="spectral"`` filters white noise on a grid with at least four
    cells per coherence length spanning ``extent`` envelope widths per axis;
    positions are spread uniformly within their cell.  ``method="modes"``
    draws thermal mode amplitudes (``mode_counts`` per axis) and samples the
    exact Cox process on per-axis grids.
    """
    if method == "spectral":
        grid, weights = boson_intensity(model, rng, cells_per_length, extent)
        idx = grid.draw_cells(weights, rng)
        return IdealAtoms(shot_id, POSITION, grid.positions(idx, rng))
    if method != "modes":
        raise ConfigurationError(f"unknown boson sampling method {method!r}")
    spectrum = _boson_spectrum(model, tuple(int(m) for m in mode_counts))
    grid = ModeGrid.for_model(model, spectrum, cells_per_length, extent)
    return IdealAtoms(shot_id, POSITION, _sample_mode_cox(spectrum, grid, rng))


@functools.lru_cache(maxsize=8)
def _boson_spectrum(model, mode_counts):
    return spectrum_from_model(model, mode_counts, Statistics.BOSON)


def _pick_rows(weights, rng):
    """One index per row of ``weights`` (n, m), proportional to the row."""
    cdf = np.cumsum(np.clip(weights, 0.0, None), axis=1)
    u = rng.random(len(cdf)) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, weights.shape[1] - 1)


def _sample_mode_cox(spectrum, grid, rng):
    shape = spectrum.occupations.shape
    amps = rng.standard_normal(shape + (2,)).view(np.complex128)[..., 0]
    amps *= np.sqrt(0.5 * spectrum.occupations)
    n = rng.poisson(float(np.sum(amps.real**2 + amps.imag**2)))
    Bx, By, Bz = grid.bases
    mx, my, mz = shape
    flat = amps.reshape(mx, my * mz)
    gram = flat @ flat.conj().T
    px = np.sum((Bx @ gram) * Bx, axis=1).real
    cdf = np.cumsum(np.clip(px, 0.0, None))
    cx = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(px) - 1)
    fy = (Bx[cx] @ flat).reshape(n, my, mz)
    fyz = np.matmul(By.astype(complex), fy)
    cy = _pick_rows(np.sum(fyz.real**2 + fyz.imag**2, axis=2), rng)
    fz = fyz[np.arange(n), cy] @ Bz.T
    cz = _pick_rows(fz.real**2 + fz.imag**2, rng)
    cells = np.column_stack([cx, cy, cz])
    pos = np.empty((n, 3))
    for a in range(3):
        pos[:, a] = grid.centers[a][cells[:, a]] + grid.cells[a] * (rng.random(n) - 0.5)
    return pos


# --------------------------------------------------------------------------
# fermions


def hermite_functions(n_modes, u):
    """Normalised Hermite functions ``h_0 .. h_{n-1}`` at points ``u``, shape (len(u), n)."""
    u = np.asarray(u, dtype=float)
    out = np.empty((u.size, n_modes))
    out[:, 0] = math.pi**-0.25 * np.exp(-0.5 * u * u)
    if n_modes > 1:
        out[:, 1] = math.sqrt(2.0) * u * out[:, 0]
    for k in range(1, n_modes - 1):
        out[:, k + 1] = math.sqrt(2.0 / (k + 1)) * u * out[:, k] - math.sqrt(k / (k + 1)) * out[:, k - 1]
    return out


class ModeGrid:
    """Orthonormal per-axis mode bases on a separable grid.

    ``bases[i]`` has shape (cells_i, modes_i); its columns are the sampled
    Hermite-Gauss functions re-orthonormalised on the grid.
    """

    def __init__(self, centers, cells, bases):
        self.centers = [np.asarray(c, float) for c in centers]
        self.cells = [float(c) for c in cells]
        self.bases = [np.asarray(b, float) for b in bases]

    @classmethod
    def from_functions(cls, centers, cells, mode_widths, mode_counts):
        bases = []
        for c, cell, a, M in zip(centers, cells, mode_widths, mode_counts):
            if M > len(c):
                raise ConfigurationError("grid axis has fewer cells than modes")
            raw = hermite_functions(M, c / a) * math.sqrt(cell / a)
            q, r = np.linalg.qr(raw)
            q *= np.where(np.diag(r) < 0, -1.0, 1.0)
            bases.append(q)
        return cls(centers, cells, bases)

    @classmethod
    def for_model(cls, model, spectrum, cells_per_length=4.0, extent=6.0):
        return _mode_grid(
            model.coherence_lengths, model.envelope_widths, spectrum.mode_widths,
            spectrum.mode_counts, float(cells_per_length), float(extent),
        )

    def kernel(self, occupations):
        """Dense kernel over all grid cells (desk-scale checks only)."""
        flat_occ = np.asarray(occupations, float).ravel()
        V = np.einsum("ai,bj,ck->abcijk", *self.bases).reshape(-1, flat_occ.size)
        return (V * flat_occ) @ V.T


@functools.lru_cache(maxsize=8)
def _mode_grid(lc, W, a, M, cells_per_length, extent):
    if cells_per_length < MIN_CELLS_PER_LENGTH:
        raise ConfigurationError(
            f"mode grid needs >= {MIN_CELLS_PER_LENGTH:g} cells per coherence length"
        )
    centers, cells = [], []
    for l, w, ai, m in zip(lc, W, a, M):
        cell = l / cells_per_length
        half = max(0.5 * extent * w, (math.sqrt(2 * m + 1) + 4.0) * ai)
        n = int(math.ceil(2 * half / cell))
        n += n % 2
        if n > MAX_AXIS_CELLS:
            raise ConfigurationError(f"mode grid axis would need {n} cells")
        centers.append((np.arange(n) - 0.5 * (n - 1)) * cell)
        cells.append(cell)
    return ModeGrid.from_functions(centers, cells, a, M)


def _pick(weights, rng):
    w = np.clip(weights, 0.0, None)
    cdf = np.cumsum(w)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(w) - 1)


def _complement(u):
    """Orthonormal basis (r, r-1) of the complement of vector ``u`` in R^r."""
    r = u.size
    nrm = np.linalg.norm(u)
    if r == 1:
        return np.zeros((1, 0))
    e = u / nrm
    v = e.copy()
    v[0] += 1.0 if e[0] >= 0 else -1.0
    H = np.eye(r) - 2.0 * np.outer(v, v) / (v @ v)
    return H[:, 1:]


def sample_projection_dpp(bases, modes, rng):
    """Sample the projection DPP spanned by product modes on a separable grid.

    ``modes`` is a (k, 3) integer array of selected mode indices.  The
    standard sequential algorithm is used; at each step the next cell is
    drawn axis by axis from exact marginals, which are cheap because the
    per-axis bases are orthonormal.  Returns a (k, 3) array of cell indices,
    all distinct.
    """
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, 3)
    k = len(modes)
    if k == 0:
        return np.empty((0, 3), dtype=np.int64)
    B = [bases[i][:, modes[:, i]] for i in range(3)]
    same = [modes[:, i][:, None] == modes[:, i][None, :] for i in range(3)]
    Q = np.eye(k)
    out = np.empty((k, 3), dtype=np.int64)
    for step in range(k):
        P = Q @ Q.T
        M0 = P * (same[1] & same[2])
        cx = _pick(np.einsum("cj,jk,ck->c", B[0], M0, B[0], optimize=True), rng)
        bx = B[0][cx]
        M1 = P * np.outer(bx, bx) * same[2]
        cy = _pick(np.einsum("cj,jk,ck->c", B[1], M1, B[1], optimize=True), rng)
        bxy = bx * B[1][cy]
        M2 = P * np.outer(bxy, bxy)
        cz = _pick(np.einsum("cj,jk,ck->c", B[2], M2, B[2], optimize=True), rng)
        out[step] = (cx, cy, cz)
        row = bxy * B[2][cz]
        Q = Q @ _complement(Q.T @ row)
    return out


def sample_fermion_shot(spectrum, model, rng, shot_id=0, cells_per_length=4.0, extent=6.0, grid=None):
    """Ideal fermions for one shot as far-field positions (determinantal process)."""
    occ = spectrum.occupations
    if np.any(occ < 0) or np.any(occ > 1.0 + 1e-12):
        raise ValueError("fermion occupations must lie in [0, 1]")
    if grid is None:
        grid = ModeGrid.for_model(model, spectrum, cells_per_length, extent)
    selected = np.argwhere(rng.random(occ.shape) < occ)
    cells = sample_projection_dpp(grid.bases, selected, rng)
    pos = np.empty((len(cells), 3))
    for a in range(3):
        pos[:, a] = grid.centers[a][cells[:, a]] + grid.cells[a] * (rng.random(len(cells)) - 0.5)
    return IdealAtoms(shot_id, POSITION, pos, meta={"cells": cells})


# --------------------------------------------------------------------------
# analytic references


def reference_g2(model, species, delta):
    """Unblurred ``g2 = 1 +/- exp(-sum_i d_i**2 / l_i**2)``; + for bosons."""
    stats = species.statistics if hasattr(species, "statistics") else Statistics(species)
    d = np.asarray(delta, dtype=float)
    lc = np.asarray(model.coherence_lengths)
    return 1.0 + stats.sign * np.exp(-np.sum((d / lc) ** 2, axis=-1))


def _blur_terms(coherence_lengths, blur_lengths, envelope_widths):
    l = np.asarray(coherence_lengths, float)
    b = 2.0 * np.asarray(blur_lengths, float) ** 2
    if envelope_widths is None:
        return l * l / 2.0, b, None
    env = 2.0 * np.asarray(envelope_widths, float) ** 2
    return 1.0 / (1.0 / env + 2.0 / (l * l)), b, env


def blurred_contrast(coherence_lengths, blur_lengths, envelope_widths=None):
    """Peak of ``|g2 - 1|`` after independent Gaussian blur of each event.

    Each event is smeared with RMS ``d_i``, so pair separations acquire
    variance ``2 d_i**2``.  For an infinitely wide cloud, convolving
    ``exp(-x**2 / l**2)`` with that gives ``l / sqrt(l**2 + 4 d**2)`` per
    axis.  With RMS envelope widths ``W_i`` the same-shot and mixed pair
    densities are blurred separately; the ratio of their peaks is then
    ``s sqrt(S + 2d**2) / (sqrt(S) sqrt(s**2 + 2d**2))`` with ``S = 2 W**2``
    and ``1 / s**2 = 1 / S + 2 / l**2``.  The correction matters once the
    blurred peak is not small against the cloud.
    """
    peak, b, env = _blur_terms(coherence_lengths, blur_lengths, envelope_widths)
    factor = np.sqrt(peak / (peak + b))
    if env is not None:
        factor = factor * np.sqrt((env + b) / env)
    return float(np.prod(factor))


def blurred_widths(coherence_lengths, blur_lengths, envelope_widths=None):
    """Widths ``w_i`` of the blurred ``g2 - 1 ~ exp(-x**2 / w**2)``.

    ``sqrt(l**2 + 4 d**2)`` for an infinitely wide cloud; with envelope
    widths the ratio of the two blurred Gaussians is used instead.
    """
    peak, b, env = _blur_terms(coherence_lengths, blur_lengths, envelope_widths)
    if env is None:
        return np.sqrt(2.0 * (peak + b))
    return np.sqrt(2.0 / (1.0 / (peak + b) - 1.0 / (env + b)))


def fano_joint_probability(species, phase_AC, phase_AD, phase_BC, phase_BD):
    """Joint detection probability at C and D for two sources A and B.

    ``|exp(i(AC + BD)) +/- exp(i(AD + BC))|**2 / 2 = 1 +/- cos(AC + BD - AD - BC)``,
    normalised so independent detections give 1.
    """
    stats = species.statistics if hasattr(species, "statistics") else Statistics(species)
    phi = (
        np.asarray(phase_AC, float) + np.asarray(phase_BD, float)
        - np.asarray(phase_AD, float) - np.asarray(phase_BC, float)
    )
    return 1.0 + stats.sign * np.cos(phi)


@dataclass(frozen=True)
class FanoDemo:
    """Two point emitters drawn from a Gaussian source, detected in 1-D.

    The far-field phase from source point ``a`` to detector point ``c`` is
    ``-m a c / (hbar t)``, so averaging the two-amplitude interference over
    the source recovers ``g2 = 1 +/- exp(-d**2 / l**2)`` with
    ``l = hbar t / (m s)``.
    """

    source_size: float
    mass: float
    fall_time: float
    half_width: float
    pairs_per_shot: int = 1
    hbar: float = PhysicalConstants.hbar

    @property
    def wavenumber_scale(self):
        return self.mass / (self.hbar * self.fall_time)

    @property
    def correlation_length(self):
        return self.hbar * self.fall_time / (self.mass * self.source_size)


def sample_fano_shot(demo, species, rng, shot_id=0):
    """Accepted detection pairs (rejection on the joint probability / 2)."""
    q = demo.wavenumber_scale
    xs = []
    for _ in range(demo.pairs_per_shot):
        while True:
            a, b = rng.normal(0.0, demo.source_size, 2)
            c, d = rng.uniform(-demo.half_width, demo.half_width, 2)
            p = fano_joint_probability(species, -q * a * c, -q * a * d, -q * b * c, -q * b * d)
            if rng.random() * 2.0 < p:
                xs.extend((c, d))
                break
    pos = np.zeros((len(xs), 3))
    pos[:, 0] = xs
    return IdealAtoms(shot_id, POSITION, pos)
