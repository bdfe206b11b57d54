"""Shared domain types, physical constants and unit conventions.

Everything is SI internally: seconds, metres, kilograms.

Geometry convention (used by every module): ``+z`` points up, the detector
lies below the source, and an atom's vertical coordinate maps to its arrival
time through ``t = t_ref + z / v``.  Atoms sitting higher in the falling cloud
therefore arrive later, and the reconstructed vertical position
``z_equiv = v_arrival * (t - t_ref)`` increases with arrival time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._validation import (
    ConfigurationError,
    check_non_negative,
    check_positive,
    check_probability,
    check_vector3,
)

__all__ = [
    "PhysicalConstants",
    "Statistics",
    "SpeciesTag",
    "SourceGeometry",
    "TrapSource",
    "DetectionEvent",
    "Shot",
    "DetectorConfig",
    "TofConfig",
    "correlation_length",
    "time_to_vertical",
    "vertical_to_time",
]


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = 1.054571817e-34
    gravity_g: float = 9.81
    mass_he4: float = 6.6464731e-27
    mass_he3: float = 5.0082343e-27

    def __post_init__(self):
        for name in ("hbar", "gravity_g", "mass_he4", "mass_he3"):
            check_positive(getattr(self, name), name)

    def mass(self, mass_ref):
        try:
            return {"he4": self.mass_he4, "he3": self.mass_he3}[mass_ref]
        except KeyError:
            raise ConfigurationError(f"unknown mass reference {mass_ref!r}") from None


class Statistics(str, enum.Enum):
    BOSON = "boson"
    FERMION = "fermion"

    @property
    def sign(self):
        """+1 for constructive (bosons), -1 for destructive (fermions) exchange."""
        return 1.0 if self is Statistics.BOSON else -1.0


@dataclass(frozen=True)
class SpeciesTag:
    statistics: Statistics = Statistics.BOSON
    mass_ref: str = "he4"

    def __post_init__(self):
        object.__setattr__(self, "statistics", Statistics(self.statistics))
        if self.mass_ref not in ("he4", "he3"):
            raise ConfigurationError(f"mass_ref must be 'he4' or 'he3', got {self.mass_ref!r}")

    @classmethod
    def helium4(cls):
        return cls(Statistics.BOSON, "he4")

    @classmethod
    def helium3(cls):
        return cls(Statistics.FERMION, "he3")


@dataclass(frozen=True)
class SourceGeometry:
    """RMS sizes of the (possibly anisotropic) source, in metres."""

    s_x: float
    s_y: float
    s_z: float

    def __post_init__(self):
        for name in ("s_x", "s_y", "s_z"):
            check_positive(getattr(self, name), name)

    @property
    def sizes(self):
        return np.array([self.s_x, self.s_y, self.s_z])


@dataclass(frozen=True)
class TrapSource:
    species: SpeciesTag
    geometry: SourceGeometry
    mean_atoms_per_shot: float
    mode_count_per_axis: tuple = (24, 24, 24)
    degeneracy_parameter: float = 0.4

    def __post_init__(self):
        check_positive(self.mean_atoms_per_shot, "mean_atoms_per_shot")
        counts = tuple(int(c) for c in self.mode_count_per_axis)
        if len(counts) != 3 or min(counts) < 1:
            raise ConfigurationError("mode_count_per_axis needs three counts, each >= 1")
        object.__setattr__(self, "mode_count_per_axis", counts)
        d = float(self.degeneracy_parameter)
        if not (0.0 < d <= 1.0):
            raise ConfigurationError(f"degeneracy_parameter must lie in (0, 1], got {d!r}")


@dataclass(frozen=True)
class TofConfig:
    fall_time: float = 0.32
    include_gravity: bool = True

    def __post_init__(self):
        check_positive(self.fall_time, "fall_time")


@dataclass(frozen=True)
class DetectorConfig:
    """Delay-line MCP response.

    ``sigma_xy`` is read as the RMS of a Gaussian blur; the quoted transverse
    resolution does not say whether it is RMS or FWHM.
    """

    quantum_efficiency: float = 0.05
    sigma_t: float = 1e-9
    sigma_xy: float = 5e-4
    aperture_diameter: float = 0.08
    v_arrival: float = 3.5
    v_spread_fraction: float = 0.005
    t_ref: float = 0.0
    dead_time: float = 0.0
    # Optional radial efficiency profile eta(r) in [0, 1], multiplied with the
    # flat quantum efficiency.  Not serialised.
    qe_profile: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        check_probability(self.quantum_efficiency, "quantum_efficiency")
        check_non_negative(self.sigma_t, "sigma_t")
        check_non_negative(self.sigma_xy, "sigma_xy")
        if not float(self.aperture_diameter) > 0:
            raise ConfigurationError("aperture_diameter must be positive (inf allowed)")
        check_positive(self.v_arrival, "v_arrival")
        f = check_non_negative(self.v_spread_fraction, "v_spread_fraction")
        if f >= 1.0:
            raise ConfigurationError("v_spread_fraction must be below 1")
        check_non_negative(self.dead_time, "dead_time")

    @classmethod
    def ideal(cls, v_arrival=3.5, t_ref=0.0):
        """Unit efficiency, no blur, no velocity spread, unlimited aperture."""
        return cls(
            quantum_efficiency=1.0,
            sigma_t=0.0,
            sigma_xy=0.0,
            aperture_diameter=math.inf,
            v_arrival=v_arrival,
            v_spread_fraction=0.0,
            t_ref=t_ref,
            dead_time=0.0,
        )

    @property
    def blur_lengths(self):
        """Per-axis positional blur (x, y, z_equiv) in metres."""
        return np.array([self.sigma_xy, self.sigma_xy, self.v_arrival * self.sigma_t])


def correlation_length(constants, mass, fall_time, source_size):
    """HBT correlation length ``hbar * t / (m * s)`` at the detector."""
    mass = check_positive(mass, "mass")
    fall_time = check_positive(fall_time, "fall_time")
    source_size = check_positive(source_size, "source_size")
    return constants.hbar * fall_time / (mass * source_size)


def time_to_vertical(event_time, config):
    """Convert arrival time(s) to the equivalent vertical position."""
    return config.v_arrival * (np.asarray(event_time, dtype=float) - config.t_ref)


def vertical_to_time(z, v, t_ref):
    return t_ref + np.asarray(z, dtype=float) / v


@dataclass(frozen=True)
class DetectionEvent:
    shot_id: int
    t: float
    x: float
    y: float
    z_equiv: float


class Shot:
    """One experimental realisation: detected events sorted by arrival time.

    Events are stored column-wise (``t``, ``x``, ``y``, ``z_equiv`` arrays);
    :attr:`events` gives the record view.
    """

    __slots__ = ("shot_id", "t", "x", "y", "z_equiv", "provenance")

    def __init__(self, shot_id, t, x, y, z_equiv, provenance=None, sort=True):
        t = np.asarray(t, dtype=float).ravel()
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        z_equiv = np.asarray(z_equiv, dtype=float).ravel()
        if not (t.size == x.size == y.size == z_equiv.size):
            raise ValueError("event columns must have equal length")
        if sort and t.size > 1:
            order = np.argsort(t, kind="stable")
            t, x, y, z_equiv = t[order], x[order], y[order], z_equiv[order]
        self.shot_id = int(shot_id)
        self.t, self.x, self.y, self.z_equiv = t, x, y, z_equiv
        self.provenance = dict(provenance or {})

    @classmethod
    def empty(cls, shot_id, provenance=None):
        e = np.empty(0)
        return cls(shot_id, e, e, e, e, provenance)

    def __len__(self):
        return self.t.size

    def __repr__(self):
        return f"Shot(shot_id={self.shot_id}, n_events={len(self)})"

    @property
    def events(self):
        return [
            DetectionEvent(self.shot_id, float(t), float(x), float(y), float(z))
            for t, x, y, z in zip(self.t, self.x, self.y, self.z_equiv)
        ]

    def positions(self):
        """(n, 3) array of reconstructed positions (x, y, z_equiv)."""
        return np.column_stack([self.x, self.y, self.z_equiv])

    def subset(self, mask):
        mask = np.asarray(mask)
        return Shot(
            self.shot_id, self.t[mask], self.x[mask], self.y[mask], self.z_equiv[mask],
            self.provenance, sort=False,
        )


def geometry_from_sizes(sizes):
    return SourceGeometry(*check_vector3(sizes, "source sizes", positive=True))
