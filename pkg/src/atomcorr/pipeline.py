"""Experiment pipelines: simulate, detect, correlate, fit.

Shots are independent: shot ``i`` draws every random number from
``shot_stream(master_seed, i)``, so the event set depends only on the
configuration and the seed, never on the worker count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .core import Statistics
from .correlator import (
    HistogramSpec,
    fit_gaussian_peak,
    fit_pair_excess,
    normalize,
    pair_histogram,
    signal_to_noise,
)
from .detector import POSITION, IdealAtoms, apply_detector, propagate_to_detector
from .halo import (
    CONDENSATE,
    SCATTERED,
    free_fall_center,
    render_slices,
    sample_halo_shot,
    select_shell_events,
    shell_radius,
)
from .rng import shot_stream
from .sources import (
    ModeGrid,
    blurred_contrast,
    blurred_widths,
    build_occupation_spectrum,
    reference_g2,
    sample_boson_shot,
    sample_fano_shot,
    sample_fermion_shot,
)

__all__ = [
    "SimulationResult",
    "simulate",
    "simulate_shot",
    "default_histogram_spec",
    "correlate_shots",
    "reference_table",
    "format_reference",
    "halo_slices",
]

_CHUNK = 64


class _ShotFactory:
    """Per-process cache of the objects every shot of a run shares."""

    def __init__(self, config):
        self.config = config
        self.constants = config.physical_constants
        self.tof = config.tof_config()
        self.detector = config.detector_config()
        exp = config.experiment
        if exp in ("hbt_boson", "hbt_fermion"):
            self.model = config.far_field()
            self.cells = config.cells_per_length()
            if exp == "hbt_fermion":
                self.spectrum = build_occupation_spectrum(config.trap_source(), self.model)
                self.grid = ModeGrid.for_model(self.model, self.spectrum, self.cells, config.source.extent)
        elif exp == "halo":
            self.halo = config.halo_config()
            self.origin = free_fall_center(self.tof, self.constants)
        else:
            self.demo = config.fano_demo()

    def ideal_atoms(self, shot_id, rng):
        c = self.config
        exp = c.experiment
        if exp == "hbt_boson":
            return sample_boson_shot(
                self.model, rng, shot_id, self.cells, c.source.extent, c.source.sampler,
                tuple(int(m) for m in c.source.mode_count_per_axis),
            )
        if exp == "hbt_fermion":
            return sample_fermion_shot(self.spectrum, self.model, rng, shot_id, grid=self.grid)
        if exp == "halo":
            atoms = sample_halo_shot(self.halo, rng, shot_id, self.constants)
            pos = propagate_to_detector(atoms, self.tof, self.constants, self.halo.species_mass)
            # the detector clock is referenced to the free-falling collision centre
            return IdealAtoms(shot_id, POSITION, pos.values - self.origin, pos.labels, pos.pair_id, pos.meta)
        return sample_fano_shot(self.demo, c.species_tag, rng, shot_id)

    def shot(self, shot_id):
        rng = shot_stream(self.config.master_seed, shot_id)
        atoms = self.ideal_atoms(shot_id, rng)
        return apply_detector(atoms, self.detector, rng)


def simulate_shot(config, shot_id):
    """Detected :class:`~atomcorr.core.Shot` for one shot id."""
    return _ShotFactory(config).shot(shot_id)


def _simulate_block(config, ids):
    factory = _ShotFactory(config)
    return [factory.shot(i) for i in ids]


@dataclass
class SimulationResult:
    shots: list
    summary: dict = field(default_factory=dict)


def simulate(config, n_jobs=None, shot_ids=None):
    """Run the configured experiment and return shots plus a run summary.

    The summary reports generated, efficiency-thinned, clipped, dead-time
    and detected atom counts, the detected fraction and wall time.
    """
    start = time.perf_counter()
    ids = list(range(config.n_shots)) if shot_ids is None else list(shot_ids)
    n_jobs = config.n_jobs if n_jobs is None else n_jobs
    blocks = [ids[i : i + _CHUNK] for i in range(0, len(ids), _CHUNK)]
    if n_jobs == 1 or len(blocks) <= 1:
        parts = [_simulate_block(config, b) for b in blocks]
    else:
        parts = Parallel(n_jobs=n_jobs)(delayed(_simulate_block)(config, b) for b in blocks)
    shots = [s for part in parts for s in part]
    summary = _summarize(config, shots)
    summary["wall_time_s"] = time.perf_counter() - start
    return SimulationResult(shots, summary)


def _summarize(config, shots):
    keys = ("n_input", "n_after_efficiency", "n_clipped", "n_dead_time", "n_detected")
    totals = {k: int(sum(s.provenance.get(k, 0) for s in shots)) for k in keys}
    n_gen = totals["n_input"]
    summary = {
        "experiment": config.experiment,
        "config_digest": config.digest(),
        "master_seed": config.master_seed,
        "n_shots": len(shots),
        "atoms_generated": n_gen,
        "atoms_after_efficiency": totals["n_after_efficiency"],
        "atoms_clipped": totals["n_clipped"],
        "atoms_dead_time": totals["n_dead_time"],
        "atoms_detected": totals["n_detected"],
        "detected_fraction": totals["n_detected"] / n_gen if n_gen else 0.0,
        "mean_detected_per_shot": totals["n_detected"] / len(shots) if shots else 0.0,
    }
    if config.experiment == "halo":
        labels = [s.provenance.get("labels") for s in shots]
        labels = np.concatenate([l for l in labels if l is not None]) if shots else np.zeros(0)
        summary["scattered_detected"] = int(np.sum(labels == SCATTERED))
        summary["condensate_detected"] = int(np.sum(labels == CONDENSATE))
    return summary


# --------------------------------------------------------------------------
# correlation


def _physics_widths(config):
    """Expected correlation widths ``exp(-x**2 / w**2)`` in detector coordinates."""
    det = config.detector_config()
    exp = config.experiment
    if exp in ("hbt_boson", "hbt_fermion"):
        return blurred_widths(config.far_field().coherence_lengths, det.blur_lengths)
    if exp == "halo":
        h = config.halo_config()
        sig = np.asarray(h.pair_sum_widths) * config.tof.fall_time / h.species_mass
        blur = np.asarray(det.blur_lengths)
        return np.sqrt(2.0 * sig**2 + 4.0 * blur**2)
    demo = config.fano_demo()
    return np.array([demo.correlation_length] * 3)


def default_histogram_spec(config):
    """Histogram spec from the ``correlate`` section, with gaps filled in.

    Missing ranges become five expected widths (halo: four).  Bins are half
    a width for 3-D histograms, which keeps bins populated at a few hundred
    shots, and a quarter width otherwise.  Halo data default to sum
    coordinates; the fano demo to a 1-D ``x`` histogram.
    """
    c = config.correlate
    exp = config.experiment
    coords = c.coordinates or ("sum" if exp == "halo" else "difference")
    if c.axes is not None:
        axes = tuple(c.axes)
    else:
        axes = ("x",) if exp == "fano_demo" else ("x", "y", "z")
    w = _physics_widths(config)
    lon_scale = 1.0 / config.detector.v_arrival if c.longitudinal == "t" else 1.0
    scale = {"x": w[0], "y": w[1], "z": w[2] * lon_scale, "r": float(np.max(w))}
    n_widths = 4.0 if exp == "halo" else 5.0
    per_bin = 0.5 if len(axes) == 3 else 0.25
    half = c.half_range if c.half_range is not None else tuple(n_widths * scale[a] for a in axes)
    bins = c.bin_width if c.bin_width is not None else tuple(per_bin * scale[a] for a in axes)
    window = dict(c.window) if c.window is not None else {}
    if exp == "halo" and c.window is None and coords == "sum":
        for a in ("x", "y", "z"):
            if a not in axes:
                window[a] = 3.0 * scale[a]
    center = tuple(c.center) if c.center is not None else (0.0, 0.0, 0.0)
    return HistogramSpec(
        axes=axes, half_range=tuple(half), bin_width=tuple(bins), window=window,
        coordinates=coords, longitudinal=c.longitudinal, center=center,
    )


def _prepare_shots(config, shots):
    if config.experiment != "halo":
        return shots
    R = shell_radius(config.halo_config(), config.physical_constants, config.tof.fall_time)
    h = config.halo
    return [select_shell_events(s, R, (0.0, 0.0, 0.0), h.shell_half_width, h.condensate_cone) for s in shots]


def correlate_shots(config, shots, spec=None, engine=None, n_jobs=None, fit=None):
    """Histogram, normalised ``g2`` and (optionally) a Gaussian fit.

    Halo events are first restricted to the scattering shell.  Returns a
    dict with ``histogram``, ``result``, ``fit`` (or None), ``snr`` and
    ``shots_used``.
    """
    c = config.correlate
    spec = spec or default_histogram_spec(config)
    engine = engine or c.engine
    n_jobs = config.n_jobs if n_jobs is None else n_jobs
    mixing = c.mixing_factor if c.mixing_factor is not None else (32 if config.experiment == "halo" else 4)
    used = _prepare_shots(config, shots)
    hist = pair_histogram(used, spec, engine=engine, mixing_factor=mixing, n_jobs=n_jobs)
    result = normalize(hist)
    out = {"histogram": hist, "result": result, "fit": None, "snr": None, "shots_used": used}
    do_fit = c.fit if fit is None else fit
    if do_fit:
        method = c.fit_method or ("excess" if config.experiment == "halo" else "ratio")
        if method == "excess":
            gfit = fit_pair_excess(hist)
            result.fit = gfit
        else:
            gfit = fit_gaussian_peak(result)
            if gfit.converged:
                out["snr"] = signal_to_noise(result, gfit)
        out["fit"] = gfit
    return out


def halo_slices(config, shot):
    """Arrival-time slab images of one halo shot over a square around the shell."""
    R = shell_radius(config.halo_config(), config.physical_constants, config.tof.fall_time)
    half = 1.3 * R
    sl = config.halo.slices
    return render_slices(shot, sl.thickness, ((-half, half), (-half, half)), sl.bins)


# --------------------------------------------------------------------------
# analytic predictions


def reference_table(config):
    """Analytic predictions for a configuration as a list of (name, value, unit)."""
    rows = []
    const = config.physical_constants
    tof = config.tof_config()
    det = config.detector_config()
    exp = config.experiment
    rows.append(("experiment", exp, ""))
    rows.append(("species", config.species_tag.mass_ref, ""))
    rows.append(("mass", config.mass, "kg"))
    rows.append(("fall_time", tof.fall_time, "s"))
    sizes = config.source.sizes if exp != "fano_demo" else (config.fano.source_size,) * 3
    lc = [const.hbar * tof.fall_time / (config.mass * s) for s in sizes]
    for axis, s, l in zip("xyz", sizes, lc):
        rows.append((f"source_size_{axis}", s, "m"))
        rows.append((f"correlation_length_{axis}", l, "m"))
    if exp in ("hbt_boson", "hbt_fermion", "fano_demo"):
        stats = config.species_tag.statistics
        sign = stats.sign
        rows.append(("g2_zero", 1.0 + sign, ""))
        blur = det.blur_lengths
        env = config.far_field().envelope_widths if exp != "fano_demo" else None
        contrast = blurred_contrast(lc, blur, env)
        rows.append(("g2_zero_blurred", 1.0 + sign * contrast, ""))
        bw = blurred_widths(lc, blur, env)
        for axis, w in zip("xyz", bw):
            rows.append((f"blurred_width_{axis}", float(w), "m"))
        if exp != "fano_demo":
            model = config.far_field()
            for axis, W in zip("xyz", model.envelope_widths):
                rows.append((f"envelope_width_{axis}", W, "m"))
            for k, axis in enumerate("xyz"):
                for frac in (0.5, 1.0, 2.0):
                    d = np.zeros(3)
                    d[k] = frac * model.coherence_lengths[k]
                    rows.append((f"g2_at_{frac:g}l_{axis}", float(reference_g2(model, stats, d)), ""))
        if stats is Statistics.FERMION:
            rows.append(("pauli_peak_occupation", _peak_occupation(config), ""))
    if exp == "halo":
        h = config.halo_config()
        for t in (0.1, 0.2, tof.fall_time):
            rows.append((f"shell_radius_t={t:g}s", shell_radius(h, const, t), "m"))
        rows.append(("free_fall_drop", 0.5 * const.gravity_g * tof.fall_time**2, "m"))
        for axis, s in zip("xyz", h.pair_sum_widths):
            rows.append((f"pair_sum_width_{axis}", s, "kg m/s"))
            rows.append((f"pair_sum_width_detector_{axis}", s * tof.fall_time / h.species_mass, "m"))
    return rows


def _peak_occupation(config):
    spec = build_occupation_spectrum(config.trap_source(), config.far_field())
    return float(spec.occupations.max())


def format_reference(rows):
    width = max(len(r[0]) for r in rows)
    out = []
    for name, value, unit in rows:
        text = f"{value:.6g}" if isinstance(value, float) and math.isfinite(value) else str(value)
        out.append(f"{name.ljust(width)}  {text} {unit}".rstrip())
    return "\n".join(out) + "\n"
