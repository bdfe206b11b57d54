"""Free-fall kinematics and the delay-line MCP detector response."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_points
from .core import Shot, time_to_vertical, vertical_to_time

__all__ = ["IdealAtoms", "propagate_to_detector", "apply_detector"]

MOMENTUM = "momentum"
POSITION = "position"


@dataclass
class IdealAtoms:
    """Pre-detector atoms of one shot, all in one representation.

    ``values`` is an (n, 3) array holding momenta (kg m/s) when
    ``representation == "momentum"`` or far-field positions (m) when it is
    ``"position"``.  ``labels`` optionally tags atoms (e.g. halo vs condensate)
    and ``pair_id`` links scattered partners; both travel with the atoms.
    """

    shot_id: int
    representation: str
    values: np.ndarray
    labels: Optional[np.ndarray] = None
    pair_id: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.representation not in (MOMENTUM, POSITION):
            raise ValueError(f"unknown representation {self.representation!r}")
        self.values = check_points(self.values, "values")
        n = len(self.values)
        for name in ("labels", "pair_id"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                if arr.shape != (n,):
                    raise ValueError(f"{name} must have one entry per atom")
                setattr(self, name, arr)

    def __len__(self):
        return len(self.values)


def propagate_to_detector(atoms, tof, constants, mass):
    """Ballistic flight: ``r = p t / m``, minus ``g t^2 / 2`` along z when gravity is on."""
    if atoms.representation != MOMENTUM:
        raise ValueError("propagate_to_detector expects momentum-space atoms")
    t = tof.fall_time
    r = atoms.values * (t / mass)
    if tof.include_gravity:
        r = r.copy()
        r[:, 2] -= 0.5 * constants.gravity_g * t * t
    return IdealAtoms(atoms.shot_id, POSITION, r, atoms.labels, atoms.pair_id, dict(atoms.meta))


def apply_detector(atoms, config, rng, provenance=None):
    """Turn ideal far-field positions into a detected, time-sorted :class:`Shot`.

    Steps, in order: efficiency thinning, transverse blur, conversion of the
    vertical coordinate to an arrival time with a per-atom velocity (plus
    timing jitter), aperture clipping and dead time.  ``z_equiv`` is always
    rebuilt from the arrival time with the nominal velocity, so a velocity
    spread shows up as a small relative error in ``z_equiv``.

    The returned shot carries the surviving atom labels/pair ids and step
    counts in ``provenance``.
    """
    if atoms.representation != POSITION:
        raise ValueError("apply_detector expects position-space atoms")
    r = atoms.values
    n_in = len(r)

    eff = np.full(n_in, config.quantum_efficiency)
    if config.qe_profile is not None and n_in:
        eff = eff * np.clip(np.asarray(config.qe_profile(np.hypot(r[:, 0], r[:, 1])), float), 0, 1)
    keep = rng.random(n_in) < eff
    r = r[keep]
    labels = atoms.labels[keep] if atoms.labels is not None else None
    pair_id = atoms.pair_id[keep] if atoms.pair_id is not None else None
    n_thinned = len(r)

    x = r[:, 0].copy()
    y = r[:, 1].copy()
    if config.sigma_xy > 0:
        x += rng.normal(0.0, config.sigma_xy, n_thinned)
        y += rng.normal(0.0, config.sigma_xy, n_thinned)

    v = np.full(n_thinned, config.v_arrival)
    if config.v_spread_fraction > 0:
        v = v * (1.0 + config.v_spread_fraction * rng.uniform(-1.0, 1.0, n_thinned))
    t = vertical_to_time(r[:, 2], v, config.t_ref)
    if config.sigma_t > 0:
        t = t + rng.normal(0.0, config.sigma_t, n_thinned)

    inside = x * x + y * y <= (0.5 * config.aperture_diameter) ** 2
    n_clipped = int(n_thinned - inside.sum())
    x, y, t = x[inside], y[inside], t[inside]
    if labels is not None:
        labels = labels[inside]
    if pair_id is not None:
        pair_id = pair_id[inside]

    order = np.argsort(t, kind="stable")
    x, y, t = x[order], y[order], t[order]
    if labels is not None:
        labels = labels[order]
    if pair_id is not None:
        pair_id = pair_id[order]

    n_dead = 0
    if config.dead_time > 0 and t.size > 1:
        alive = _dead_time_mask(x, y, t, config)
        n_dead = int(t.size - alive.sum())
        x, y, t = x[alive], y[alive], t[alive]
        if labels is not None:
            labels = labels[alive]
        if pair_id is not None:
            pair_id = pair_id[alive]

    prov = dict(provenance or {})
    prov.update(
        n_input=n_in,
        n_after_efficiency=n_thinned,
        n_clipped=n_clipped,
        n_dead_time=n_dead,
        n_detected=int(t.size),
    )
    if labels is not None:
        prov["labels"] = labels
    if pair_id is not None:
        prov["pair_id"] = pair_id
    return Shot(atoms.shot_id, t, x, y, time_to_vertical(t, config), prov, sort=False)


def _dead_time_mask(x, y, t, config):
    # Cells of one transverse resolution element; a later hit within the dead
    # time of the last *recorded* hit in the same cell is lost.
    pitch = config.sigma_xy if config.sigma_xy > 0 else 1e-6
    cx = np.floor(x / pitch).astype(np.int64)
    cy = np.floor(y / pitch).astype(np.int64)
    alive = np.ones(t.size, dtype=bool)
    last = {}
    for i in range(t.size):
        key = (cx[i], cy[i])
        prev = last.get(key)
        if prev is not None and t[i] - prev < config.dead_time:
            alive[i] = False
        else:
            last[key] = t[i]
    return alive
