"""Scattering halo from two colliding condensates.

Momenta are generated in the centre-of-mass frame of the collision, where the
two condensates move at ``+hbar k e_x`` and ``-hbar k e_x``.  Elastic s-wave
collisions put atom pairs on a sphere of radius ``hbar k`` with nearly
opposite momenta; after the time of flight the sphere becomes a shell of
radius ``hbar k t / m`` falling with the condensates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import ConfigurationError, check_non_negative, check_positive, check_vector3
from .core import PhysicalConstants
from .detector import MOMENTUM, IdealAtoms

__all__ = [
    "HaloConfig",
    "RAMAN_PARAMETERS",
    "SCATTERED",
    "CONDENSATE",
    "SliceStack",
    "sample_halo_shot",
    "shell_radius",
    "free_fall_center",
    "render_slices",
    "select_shell_events",
    "fit_shell",
]

SCATTERED = 1
CONDENSATE = 0

HE_TRANSITION_WAVELENGTH = 1.083e-6

# Optical parameters of the Raman transfer.  They document the configuration
# and do not enter any computation.
RAMAN_PARAMETERS = {
    "detuning_hz": 400e6,
    "relative_detuning_hz": 600e3,
    "transition": "2^3S_1 - 2^3P_0",
    "wavelength_m": HE_TRANSITION_WAVELENGTH,
}


@dataclass(frozen=True)
class HaloConfig:
    """Collision halo parameters (SI units).

    Parameters
    ----------
    k_recoil : float
        Recoil wavenumber; each condensate carries ``hbar * k_recoil`` in the
        centre-of-mass frame.
    species_mass : float
    mean_pairs_per_shot : float
        Mean of the Poisson number of scattered pairs.
    pair_sum_widths : 3-tuple
        RMS of the pair momentum sum ``p1 + p2`` per axis (kg m/s).
    mean_field_broadening : float
        Fractional RMS radial width of the shell.  Each atom of a pair gets
        its own radial kick, so the broadening widens the back-to-back
        radial correlation but not the colinear one.
    scattered_fraction : float
        Scattered atoms over all atoms, in (0, 0.1] unless
        ``allow_large_fraction``.
    condensate_atoms_per_shot : float, optional
        Mean number of unscattered atoms.  Derived from
        ``scattered_fraction`` when omitted and checked against it otherwise.
    condensate_momentum_widths : 3-tuple, optional
        RMS momentum spread of each condensate; defaults to
        ``pair_sum_widths``.
    colinear_multiplicity : float
        Mean size of thermally bunched multiplets (geometric distribution).
        Values above one duplicate pairs with a momentum jitter of RMS
        ``pair_sum_widths`` per copy, which yields a colinear HBT peak; the
        jitter is opposite on the two partners so every copy conserves
        momentum.
    """

    k_recoil: float = 2 * math.pi / HE_TRANSITION_WAVELENGTH
    species_mass: float = PhysicalConstants().mass_he4
    mean_pairs_per_shot: float = 20.0
    pair_sum_widths: tuple = (3.5e-30, 1.75e-30, 2.3e-30)
    mean_field_broadening: float = 0.0
    scattered_fraction: float = 0.05
    condensate_atoms_per_shot: Optional[float] = None
    condensate_momentum_widths: Optional[tuple] = None
    colinear_multiplicity: float = 1.0
    allow_large_fraction: bool = False

    def __post_init__(self):
        check_positive(self.k_recoil, "k_recoil")
        check_positive(self.species_mass, "species_mass")
        check_non_negative(self.mean_pairs_per_shot, "mean_pairs_per_shot")
        object.__setattr__(self, "pair_sum_widths", check_vector3(self.pair_sum_widths, "pair_sum_widths"))
        check_non_negative(self.mean_field_broadening, "mean_field_broadening")
        f = self.scattered_fraction
        upper = 1.0 if self.allow_large_fraction else 0.1
        if not (0.0 < f <= upper):
            raise ConfigurationError(f"scattered_fraction must lie in (0, {upper:g}], got {f!r}")
        derived = 2.0 * self.mean_pairs_per_shot * (1.0 - f) / f
        if self.condensate_atoms_per_shot is None:
            object.__setattr__(self, "condensate_atoms_per_shot", derived)
        else:
            n = float(self.condensate_atoms_per_shot)
            check_non_negative(n, "condensate_atoms_per_shot")
            if not math.isclose(n, derived, rel_tol=0.01, abs_tol=1e-9):
                raise ConfigurationError(
                    f"condensate_atoms_per_shot={n:g} disagrees with scattered_fraction={f:g} "
                    f"(expected {derived:g}); set one of them only"
                )
            object.__setattr__(self, "condensate_atoms_per_shot", n)
        if self.condensate_momentum_widths is None:
            object.__setattr__(self, "condensate_momentum_widths", self.pair_sum_widths)
        else:
            object.__setattr__(
                self, "condensate_momentum_widths",
                check_vector3(self.condensate_momentum_widths, "condensate_momentum_widths"),
            )
        if not self.colinear_multiplicity >= 1.0:
            raise ConfigurationError("colinear_multiplicity is a mean multiplet size and must be >= 1")

    @classmethod
    def from_geometry(cls, geometry, constants=None, **kwargs):
        """Config whose pair-sum widths are ``hbar / s_i`` for the source sizes."""
        constants = constants or PhysicalConstants()
        widths = tuple(constants.hbar / s for s in geometry.sizes)
        return cls(pair_sum_widths=widths, **kwargs)

    @property
    def recoil_momentum(self):
        return PhysicalConstants().hbar * self.k_recoil

    @property
    def momentum_classes(self):
        """Lab-frame momentum transfers of the two Raman beams, unit ``hbar k``."""
        return ((1.0, 0.0, 1.0), (-1.0, 0.0, 1.0))


def shell_radius(config, constants, t):
    """``hbar k t / m``: radius of the scattering shell after time ``t``."""
    if t < 0:
        raise ValueError("time must be non-negative")
    constants = constants or PhysicalConstants()
    return constants.hbar * config.k_recoil * t / config.species_mass


def free_fall_center(tof, constants=None):
    """Position of the collision centre after the time of flight."""
    constants = constants or PhysicalConstants()
    t = tof.fall_time
    dz = -0.5 * constants.gravity_g * t * t if tof.include_gravity else 0.0
    return np.array([0.0, 0.0, dz])


def _unit_vectors(rng, n):
    u = rng.standard_normal((n, 3))
    norm = np.linalg.norm(u, axis=1)
    bad = norm == 0
    while bad.any():  # measure-zero; redraw to stay exact
        u[bad] = rng.standard_normal((int(bad.sum()), 3))
        norm = np.linalg.norm(u, axis=1)
        bad = norm == 0
    return u / norm[:, None]


def sample_halo_shot(config, rng, shot_id=0, constants=None):
    """Momenta of one shot: scattered pairs followed by condensate atoms.

    Labels are :data:`SCATTERED` or :data:`CONDENSATE`; ``pair_id`` links the
    two partners of each emitted pair (``-1`` for condensate atoms).  The
    random draws happen in a fixed order whatever the parameter values, so
    two configs run on the same stream share their pair directions.
    """
    constants = constants or PhysicalConstants()
    hk = constants.hbar * config.k_recoil
    sig = np.asarray(config.pair_sum_widths)

    n_pairs = int(rng.poisson(config.mean_pairs_per_shot))
    u = _unit_vectors(rng, n_pairs)
    delta = rng.standard_normal((n_pairs, 3)) * sig
    eps = rng.standard_normal((n_pairs, 2)) * config.mean_field_broadening
    mult = rng.geometric(1.0 / config.colinear_multiplicity, n_pairs)

    p1 = (hk * (1.0 + eps[:, 0]))[:, None] * u + 0.5 * delta
    p2 = -(hk * (1.0 + eps[:, 1]))[:, None] * u + 0.5 * delta
    parent = np.repeat(np.arange(n_pairs), mult)
    jitter = rng.standard_normal((parent.size, 3)) * sig
    if config.colinear_multiplicity == 1.0:
        jitter[:] = 0.0
    q1 = p1[parent] + jitter
    q2 = p2[parent] - jitter
    n_emit = parent.size

    n_cond = int(rng.poisson(config.condensate_atoms_per_shot))
    side = np.where(rng.random(n_cond) < 0.5, 1.0, -1.0)
    cond = rng.standard_normal((n_cond, 3)) * np.asarray(config.condensate_momentum_widths)
    cond[:, 0] += side * hk

    values = np.concatenate([q1, q2, cond])
    ids = np.arange(n_emit)
    labels = np.concatenate([np.full(2 * n_emit, SCATTERED), np.full(n_cond, CONDENSATE)])
    pair_id = np.concatenate([ids, ids, np.full(n_cond, -1)])
    meta = {"n_pairs": n_pairs, "n_emitted_pairs": n_emit, "n_condensate": n_cond}
    return IdealAtoms(shot_id, MOMENTUM, values, labels, pair_id, meta)


@dataclass
class SliceStack:
    """Arrival-time slabs of a shot, each a 2D ``(x, y)`` count histogram.

    ``counts`` has shape ``(n_slices, nx, ny)``.
    """

    counts: np.ndarray
    t_edges: np.ndarray
    x_edges: np.ndarray
    y_edges: np.ndarray

    def __len__(self):
        return len(self.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def render_slices(events, slice_thickness, bounds, bins=64, t_range=None):
    """Cut events into consecutive arrival-time slabs of ``slice_thickness``.

    Parameters
    ----------
    events : Shot or (n, 3) array of ``(t, x, y)``
        Events sorted by arrival time.
    slice_thickness : float
        Slab duration in seconds.
    bounds : ((xmin, xmax), (ymin, ymax))
    bins : int or (int, int)
    t_range : (t0, t1), optional
        Time span to slice; defaults to the span of the events.

    Returns
    -------
    SliceStack
        Empty (zero slices) for empty input.  Events outside ``bounds`` or
        ``t_range`` are not counted.
    """
    check_positive(slice_thickness, "slice_thickness")
    if hasattr(events, "t"):
        t, x, y = events.t, events.x, events.y
    else:
        arr = np.asarray(events, dtype=float).reshape(-1, 3)
        t, x, y = arr[:, 0], arr[:, 1], arr[:, 2]
    nx, ny = (bins, bins) if np.isscalar(bins) else bins
    (x0, x1), (y0, y1) = bounds
    x_edges = np.linspace(x0, x1, int(nx) + 1)
    y_edges = np.linspace(y0, y1, int(ny) + 1)
    if t.size == 0 and t_range is None:
        return SliceStack(np.zeros((0, int(nx), int(ny)), dtype=np.int64), np.zeros(1), x_edges, y_edges)
    t0, t1 = (float(t.min()), float(t.max())) if t_range is None else map(float, t_range)
    n_slices = max(1, int(math.ceil((t1 - t0) / slice_thickness)))
    if t0 + n_slices * slice_thickness <= t1:
        n_slices += 1  # keep the last event inside the final slab
    t_edges = t0 + slice_thickness * np.arange(n_slices + 1)
    counts, _ = np.histogramdd(np.column_stack([t, x, y]), bins=(t_edges, x_edges, y_edges))
    return SliceStack(counts.astype(np.int64), t_edges, x_edges, y_edges)


def select_shell_events(shot, radius, center, half_width=0.25, cone=0.95):
    """Keep events on the shell and away from the condensates.

    An event survives if its distance from ``center`` lies within
    ``radius * (1 +/- half_width)`` and its direction satisfies
    ``|u_x| < cone`` (the condensates sit on the x axis).
    """
    d = shot.positions() - np.asarray(center, dtype=float)
    rho = np.linalg.norm(d, axis=1)
    safe = np.where(rho > 0, rho, 1.0)
    keep = (np.abs(rho - radius) <= half_width * radius) & (np.abs(d[:, 0]) / safe < cone)
    return shot.subset(keep)


def fit_shell(points, n_bins=200, r_max=None):
    """Centre and radius of a spherical shell of points.

    The centre is the mean position and the radius the peak of the radial
    histogram, refined with a parabola through the three highest bins.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise ValueError("need at least three points to locate a shell")
    center = pts.mean(axis=0)
    rho = np.linalg.norm(pts - center, axis=1)
    r_max = float(rho.max()) if r_max is None else float(r_max)
    counts, edges = np.histogram(rho, bins=n_bins, range=(0.0, r_max))
    i = int(np.argmax(counts))
    width = edges[1] - edges[0]
    peak = 0.5 * (edges[i] + edges[i + 1])
    if 0 < i < n_bins - 1:
        a, b, c = counts[i - 1 : i + 2].astype(float)
        den = a - 2 * b + c
        if den < 0:
            peak += 0.5 * width * (a - c) / den
    return center, float(peak)
