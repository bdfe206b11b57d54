"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints (see
``conftest.py``) and then asserts at the stated tolerance.
"""

import itertools
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import special, stats

from atomcorr.config import parse_config
from atomcorr.core import DetectorConfig, PhysicalConstants, SourceGeometry, Statistics, TofConfig
from atomcorr.correlator import (
    GaussianPeakFitter,
    HistogramSpec,
    fit_gaussian_peak,
    fit_pair_excess,
    normalize,
    pair_histogram,
)
from atomcorr.detector import apply_detector, propagate_to_detector
from atomcorr.halo import (
    SCATTERED,
    HaloConfig,
    fit_shell,
    free_fall_center,
    sample_halo_shot,
    select_shell_events,
    shell_radius,
)
from atomcorr.pipeline import simulate
from atomcorr.rng import shot_stream
from atomcorr.sources import (
    ModeGrid,
    OccupationSpectrum,
    blurred_contrast,
    blurred_widths,
    fano_joint_probability,
    sample_fermion_shot,
)

from conftest import record

pytestmark = pytest.mark.acceptance

IDEAL_DETECTOR = """
detector:
  quantum_efficiency: 1.0
  sigma_t: 0.0
  sigma_xy: 0.0
  aperture_diameter: .inf
  v_spread_fraction: 0.0
"""


def run_config(text, **overrides):
    return parse_config(text, overrides)


def hbt_histogram(shots, lengths, n_widths=5.0, per_bin=0.25):
    lengths = np.asarray(lengths)
    spec = HistogramSpec(
        axes=("x", "y", "z"), half_range=tuple(n_widths * lengths), bin_width=tuple(per_bin * lengths)
    )
    return pair_histogram(shots, spec)


# --------------------------------------------------------------------------
# 1. boson bunching


@pytest.fixture(scope="module")
def boson_run():
    start = time.perf_counter()
    config = run_config(
        """
experiment: hbt_boson
n_shots: 2000
master_seed: 11
source:
  sizes: [2.0e-5, 4.0e-5, 3.0e-5]
  mean_atoms_per_shot: 100
  degeneracy_parameter: 0.4
"""
        + IDEAL_DETECTOR
    )
    return config, simulate(config), time.perf_counter() - start


def test_criterion_01_boson_bunching(boson_run):
    config, run, sim_time = boson_run
    start = time.perf_counter()
    lc = np.asarray(config.far_field().coherence_lengths)
    fit = fit_gaussian_peak(normalize(hbt_histogram(run.shots, lc)))
    elapsed = sim_time + time.perf_counter() - start
    g2_zero = 1.0 + fit.contrast
    width_ratio = np.asarray(fit.widths) / lc
    mean_atoms = run.summary["mean_detected_per_shot"]
    ok = fit.converged and abs(g2_zero - 2.0) <= 0.1 and np.all(np.abs(width_ratio - 1) <= 0.10)
    record(
        1, "boson bunching", ok,
        f"g2(0)={g2_zero:.3f} (2.0+/-0.1), widths/l={np.round(width_ratio, 3).tolist()} (+/-10%), "
        f"{mean_atoms:.1f} atoms/shot, {elapsed:.0f}s",
    )
    assert fit.converged
    assert abs(g2_zero - 2.0) <= 0.1
    assert np.all(np.abs(width_ratio - 1) <= 0.10)


def test_boson_g2_converges_to_reference_pointwise(boson_run):
    # same run as criterion 1; bins of 0.75 l compared with the bin-averaged reference
    config, run, _ = boson_run
    lc = np.asarray(config.far_field().coherence_lengths)
    per_bin = 0.75
    result = normalize(hbt_histogram(run.shots, lc, n_widths=3.0, per_bin=per_bin))
    centers = np.array(np.meshgrid(*[np.arange(-3.0, 3.0, per_bin) + per_bin / 2] * 3, indexing="ij"))
    lo, hi = centers - per_bin / 2, centers + per_bin / 2
    averaged = np.prod(math.sqrt(math.pi) / (2 * per_bin) * (special.erf(hi) - special.erf(lo)), axis=0)
    inside = (np.sqrt(np.sum(centers**2, axis=0)) <= 3.0) & result.valid
    deviation = np.abs(result.g2 - (1.0 + averaged))[inside]
    assert deviation.max() < 0.1


# --------------------------------------------------------------------------
# 2. fermion antibunching and the arrival-time pair histogram


def _fit_envelope(centers, counts, bin_width, exclude=0.0):
    use = np.abs(centers) >= exclude
    fitter = GaussianPeakFitter(fit_offset=False, bin_widths=(bin_width,))
    fitter.fit(centers[use, None], counts[use], sample_weight=1.0 / np.maximum(counts[use], 1.0))
    return fitter


def test_criterion_02_fermion_antibunching():
    start = time.perf_counter()
    config = run_config(
        """
experiment: hbt_fermion
n_shots: 1000
master_seed: 12
source:
  sizes: [2.0e-5, 4.0e-5, 3.0e-5]
  mean_atoms_per_shot: 50
  degeneracy_parameter: 0.3
"""
        + IDEAL_DETECTOR
    )
    run = simulate(config)
    model = config.far_field()
    lc = np.asarray(model.coherence_lengths)
    fit = fit_gaussian_peak(normalize(hbt_histogram(run.shots, lc)))
    g2_zero = 1.0 + fit.contrast

    # raw arrival-time pair histogram against the single-event envelope
    v = config.detector.v_arrival
    w_t = model.envelope_widths[2] / v
    l_t = lc[2] / v
    t_all = np.concatenate([s.t for s in run.shots])
    bw = l_t / 4.0
    edges = np.arange(-6 * w_t, 6 * w_t + bw, bw)
    counts, _ = np.histogram(t_all - t_all.mean(), bins=edges)
    cloud = _fit_envelope(0.5 * (edges[1:] + edges[:-1]), counts.astype(float), bw)
    cloud_hwhm = cloud.widths_[0] * math.sqrt(math.log(2))

    spec = HistogramSpec(axes=("z",), longitudinal="t", half_range=(6 * math.sqrt(2) * w_t,), bin_width=(bw,))
    pairs = pair_histogram(run.shots, spec)
    same, _ = pairs.folded()
    centers = spec.centers()[0]
    env = _fit_envelope(centers, same.astype(float), bw, exclude=3 * l_t)
    pair_hwhm = env.widths_[0] * math.sqrt(math.log(2))
    ratio = pair_hwhm / cloud_hwhm / math.sqrt(2)
    # the dip needs small transverse separations as well
    near = HistogramSpec(axes=("z",), longitudinal="t", half_range=spec.half_range, bin_width=(bw,),
                         window={"x": 0.5 * lc[0], "y": 0.5 * lc[1]})
    close, _ = pair_histogram(run.shots, near).folded()
    near_env = _fit_envelope(centers, close.astype(float), bw, exclude=3 * l_t)
    inner = np.abs(centers) < 0.5 * l_t
    deficit = close[inner].sum() / near_env.predict(centers[inner, None]).sum()
    elapsed = time.perf_counter() - start
    ok = fit.converged and g2_zero <= 0.1 and abs(ratio - 1) <= 0.05 and deficit < 0.5
    record(
        2, "fermion antibunching", ok,
        f"g2(0)={g2_zero:.3f} (<=0.1), pair HWHM/(sqrt2 cloud HWHM)={ratio:.3f} (+/-5%), "
        f"counts/envelope at |dt|<l_t/2, |dx|,|dy|<l/2 = {deficit:.2f} (<0.5), {elapsed:.0f}s",
    )
    assert fit.converged
    assert g2_zero <= 0.1
    assert abs(ratio - 1) <= 0.05
    assert deficit < 0.5


# --------------------------------------------------------------------------
# 3. anisotropy law


def test_criterion_03_anisotropy_law():
    sizes_x = [1.0e-5, 2.0e-5, 4.0e-5]
    fitted = []
    for k, sx in enumerate(sizes_x):
        config = run_config(
            f"""
experiment: hbt_boson
n_shots: 800
master_seed: {30 + k}
source:
  sizes: [{sx}, 4.0e-5, 3.0e-5]
  mean_atoms_per_shot: 100
  degeneracy_parameter: 0.4
"""
            + IDEAL_DETECTOR
        )
        run = simulate(config)
        lc = np.asarray(config.far_field().coherence_lengths)
        fit = fit_gaussian_peak(normalize(hbt_histogram(run.shots, lc, per_bin=1 / 3)))
        assert fit.converged
        fitted.append(fit.widths[0])
    slope = np.polyfit(np.log(sizes_x), np.log(fitted), 1)[0]
    ok = abs(slope + 1.0) <= 0.1
    record(3, "anisotropy law", ok, f"log-log slope of l_x vs s_x = {slope:.3f} (-1.0+/-0.1)")
    assert ok


# --------------------------------------------------------------------------
# 4. detector blur


def test_criterion_04_blur_contrast():
    base = run_config(
        """
experiment: hbt_boson
source:
  sizes: [3.0e-5, 3.0e-5, 2.0e-5]
"""
    )
    lc = np.asarray(base.far_field().coherence_lengths)
    v = base.detector.v_arrival
    config = run_config(
        f"""
experiment: hbt_boson
n_shots: 4000
master_seed: 14
source:
  sizes: [3.0e-5, 3.0e-5, 2.0e-5]
  mean_atoms_per_shot: 100
  degeneracy_parameter: 0.4
detector:
  quantum_efficiency: 1.0
  sigma_xy: {float(lc[0])!r}
  sigma_t: {float(lc[2] / v)!r}
  aperture_diameter: .inf
  v_spread_fraction: 0.0
"""
    )
    blur = np.asarray(config.detector_config().blur_lengths)
    assert np.allclose(blur, lc)
    env = config.far_field().envelope_widths
    predicted = blurred_contrast(lc, blur, env)
    widths = blurred_widths(lc, blur, env)
    run = simulate(config)
    fit = fit_gaussian_peak(normalize(hbt_histogram(run.shots, widths, n_widths=3.0, per_bin=0.5)))
    measured = fit.contrast
    rel = measured / predicted - 1
    ok = fit.converged and abs(rel) <= 0.20
    record(
        4, "detector-blur contrast", ok,
        f"bunching amplitude {measured:.4f} vs convolution prediction {predicted:.4f} ({rel:+.1%}, +/-20%); infinite-cloud limit {blurred_contrast(lc, blur):.4f}",
    )
    assert fit.converged
    assert abs(rel) <= 0.20


# --------------------------------------------------------------------------
# 5. DPP micro-oracle


def test_criterion_05_dpp_micro_oracle():
    centers = [np.array([-1.0, 0.0, 1.0]), np.array([-0.5, 0.5]), np.array([0.0])]
    cells = [1.0, 1.0, 1.0]
    grid = ModeGrid.from_functions(centers, cells, (1.0, 1.0, 1.0), (2, 1, 1))
    occ = np.array([0.7, 0.4]).reshape(2, 1, 1)
    spectrum = OccupationSpectrum((2, 1, 1), occ, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5), Statistics.FERMION)
    K = grid.kernel(occ)
    n_cells = K.shape[0]
    shape = tuple(len(c) for c in centers)

    rng = np.random.default_rng(15)
    n_samples = 100_000
    freq = {}
    for _ in range(n_samples):
        atoms = sample_fermion_shot(spectrum, None, rng, grid=grid)
        flat = tuple(sorted(np.ravel_multi_index(tuple(atoms.meta["cells"].T), shape).tolist()))
        freq[flat] = freq.get(flat, 0) + 1

    worst = 0.0
    total = 0.0
    for size in range(n_cells + 1):
        for A in itertools.combinations(range(n_cells), size):
            comp = np.ones(n_cells)
            comp[list(A)] = 0.0
            exact = abs(np.linalg.det(K - np.diag(comp)))
            total += exact
            worst = max(worst, abs(freq.get(A, 0) / n_samples - exact))
    assert total == pytest.approx(1.0, abs=1e-12)
    ok = worst <= 1e-2
    record(5, "DPP micro-oracle", ok, f"max |empirical - det| = {worst:.4f} over all subsets (<=1e-2)")
    assert ok


# --------------------------------------------------------------------------
# 6. halo kinematics


def _halo_shots(cfg, tof, n_shots, seed, detector=None):
    c = PhysicalConstants()
    detector = detector or DetectorConfig.ideal()
    shots = []
    for i in range(n_shots):
        rng = shot_stream(seed, i)
        atoms = propagate_to_detector(sample_halo_shot(cfg, rng, i, c), tof, c, cfg.species_mass)
        shots.append(apply_detector(atoms, detector, rng))
    return shots


def test_criterion_06_halo_kinematics():
    c = PhysicalConstants()
    tof = TofConfig(0.32)
    cfg = HaloConfig.from_geometry(SourceGeometry(3e-5, 6e-5, 4.6e-5), mean_pairs_per_shot=500)
    shots = _halo_shots(cfg, tof, 200, 16)
    R = shell_radius(cfg, c, tof.fall_time)
    drop = 0.5 * c.gravity_g * tof.fall_time**2
    guess = free_fall_center(tof, c)
    shell = np.concatenate([select_shell_events(s, R, guess).positions() for s in shots])
    center, radius = fit_shell(shell, n_bins=400, r_max=1.5 * R)
    radius_err = radius / R - 1
    drop_err = -center[2] / drop - 1

    # one partner per pair so counts are independent; the earlier arrival
    # is always the lower one, so the partner is picked by a coin instead
    coin = np.random.default_rng(61)
    dirs = []
    for s in shots:
        pid = np.where(s.provenance["labels"] == SCATTERED, s.provenance["pair_id"], -1)
        order = np.argsort(pid, kind="stable")
        ids, start, count = np.unique(pid[order], return_index=True, return_counts=True)
        use = ids >= 0
        pick = order[start[use] + (coin.random(use.sum()) < 0.5) * (count[use] - 1)]
        d = s.positions()[pick] - center
        dirs.append(d / np.linalg.norm(d, axis=1)[:, None])
    dirs = np.concatenate(dirs)
    band = np.minimum(((dirs[:, 2] + 1) / 2 * 12).astype(int), 11)
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    sector = np.minimum(((phi + np.pi) / (2 * np.pi) * 16).astype(int), 15)
    counts = np.bincount(band * 16 + sector, minlength=192)
    chi2, p_value = stats.chisquare(counts)
    ok = abs(radius_err) <= 0.01 and abs(drop_err) <= 0.01 and p_value > 0.01
    record(
        6, "halo kinematics", ok,
        f"radius {radius_err:+.2%}, free-fall drop {drop_err:+.2%} (both +/-1%), "
        f"uniformity chi2={chi2:.0f}/191 dof p={p_value:.3f} over {len(dirs)} pairs (>0.01)",
    )
    assert len(dirs) >= 90_000
    assert abs(radius_err) <= 0.01
    assert abs(drop_err) <= 0.01
    assert p_value > 0.01


# --------------------------------------------------------------------------
# 7. halo pair correlations


def _axis_spec(axis, sig, coordinates, center, n_widths, per_bin):
    k = "xyz".index(axis)
    window = {a: 3.0 * sig[j] for j, a in enumerate("xyz") if a != axis}
    return HistogramSpec(
        axes=(axis,), coordinates=coordinates, center=tuple(center),
        half_range=(n_widths * sig[k],), bin_width=(per_bin * sig[k],), window=window,
    )


def test_criterion_07_pair_correlations():
    c = PhysicalConstants()
    tof = TofConfig(0.32)
    geom = SourceGeometry(3e-5, 6e-5, 4.6e-5)
    mixing = 32

    def shell_shots(eps, mult):
        cfg = HaloConfig.from_geometry(geom, mean_pairs_per_shot=20, mean_field_broadening=eps,
                                       colinear_multiplicity=mult)
        R = shell_radius(cfg, c, tof.fall_time)
        ctr = free_fall_center(tof, c)
        raw = _halo_shots(cfg, tof, 500, 17)
        n_pairs = sum(np.unique(s.provenance["pair_id"][s.provenance["pair_id"] >= 0]).size for s in raw)
        return cfg, R, ctr, [select_shell_events(s, R, ctr) for s in raw], n_pairs

    cfg, R, ctr, shots, n_pairs = shell_shots(0.0, 1.0)
    sig = np.asarray(cfg.pair_sum_widths) * tof.fall_time / cfg.species_mass
    recovered, significance = [], []
    for k, axis in enumerate("xyz"):
        fit = fit_pair_excess(pair_histogram(shots, _axis_spec(axis, sig, "sum", ctr, 6, 1 / 3), mixing_factor=mixing))
        assert fit.converged
        recovered.append(fit.widths[0] / math.sqrt(2) / sig[k])
        significance.append(fit.amplitude / fit.stderr["amplitude"])
    recovered = np.array(recovered)
    # anisotropy ordering survives the whole chain
    same_order = np.array_equal(np.argsort(recovered * sig), np.argsort(sig))

    radial, colinear = {}, {}
    for eps in (0.0, 0.05):
        _, R, ctr, shots_e, _ = shell_shots(eps, 3.0)
        rspec = HistogramSpec(axes=("r",), coordinates="sum", center=tuple(ctr), half_range=(0.3 * R,),
                              bin_width=(0.01 * R,), window={"tan": 3.0 * sig.max()})
        # background share is < 1% under this peak and has the same radial shape
        rfit = fit_pair_excess(pair_histogram(shots_e, rspec, mixing_factor=mixing),
                               GaussianPeakFitter(fit_offset=False, bin_widths=(0.01 * R,)))
        radial[eps] = rfit.widths[0]
        widths = []
        for k, axis in enumerate("xyz"):
            cfit = fit_pair_excess(pair_histogram(shots_e, _axis_spec(axis, sig, "difference", (0, 0, 0), 8, 0.5),
                                                  mixing_factor=mixing))
            widths.append(cfit.widths[0])
        colinear[eps] = np.array(widths)
    radial_gain = radial[0.05] / radial[0.0] - 1
    colinear_change = np.max(np.abs(colinear[0.05] / colinear[0.0] - 1))
    ok = (
        min(significance) >= 5
        and np.all(np.abs(recovered - 1) <= 0.10)
        and radial_gain >= 0.20
        and colinear_change < 0.05
        and same_order
    )
    record(
        7, "pair correlations", ok,
        f"{n_pairs} pairs, peak significance {min(significance):.0f} sigma (>=5), "
        f"sum widths/sigma={np.round(recovered, 3).tolist()} (+/-10%, order kept: {same_order}), "
        f"radial width {radial_gain:+.0%} (>=+20%), colinear {colinear_change:.1%} (<5%)",
    )
    assert n_pairs >= 9_000
    assert min(significance) >= 5
    assert np.all(np.abs(recovered - 1) <= 0.10)
    assert radial_gain >= 0.20
    assert colinear_change < 0.05
    assert same_order


# --------------------------------------------------------------------------
# 8. correlator oracle


def _random_instance(rng):
    from atomcorr.core import Shot

    n_total = int(np.exp(rng.uniform(0.0, math.log(1e4))))
    n_shots = int(rng.integers(1, 9))
    sizes = rng.multinomial(n_total, np.ones(n_shots) / n_shots)
    scale = rng.uniform(0.5, 2.0, 3)
    shots = []
    for i, n in enumerate(sizes):
        pos = rng.normal(0.0, 1.0, (n, 3)) * scale
        if rng.random() < 0.2:  # exact ties and lattice points
            pos = np.round(pos * 4) / 4
        t = pos[:, 2] / 3.0 + rng.normal(0, 1e-3, n) * (rng.random() < 0.5)
        shots.append(Shot(i, t, pos[:, 0], pos[:, 1], pos[:, 2]))
    coordinates = "sum" if rng.random() < 0.3 else "difference"
    pool = ["x", "y", "z", "r"] if coordinates == "sum" else ["x", "y", "z"]
    n_axes = int(rng.integers(1, 4))
    axes = tuple(rng.choice(pool, size=n_axes, replace=False).tolist())
    longitudinal = "t" if coordinates == "difference" and rng.random() < 0.3 else "z"
    half = tuple(float(rng.uniform(0.05, 1.5)) * (1 / 3 if a == "z" and longitudinal == "t" else 1) for a in axes)
    bins = tuple(h / int(rng.integers(1, 12)) for h in half)
    window = {}
    for a in ("x", "y", "z") + (("tan",) if coordinates == "sum" else ()):
        if a not in axes and rng.random() < 0.5:
            window[a] = float(rng.uniform(0.1, 2.0))
    spec = HistogramSpec(axes=axes, half_range=half, bin_width=bins, window=window,
                         coordinates=coordinates, longitudinal=longitudinal)
    return shots, spec, int(rng.integers(1, 3))


def test_criterion_08_correlator_oracle():
    rng = np.random.default_rng(18)
    mismatches = 0
    parallel_mismatches = 0
    largest = 0
    for trial in range(1000):
        shots, spec, mixing = _random_instance(rng)
        largest = max(largest, sum(len(s) for s in shots))
        fast = pair_histogram(shots, spec, engine="fast", mixing_factor=mixing)
        naive = pair_histogram(shots, spec, engine="naive", mixing_factor=mixing)
        if not (np.array_equal(fast.same_shot_counts, naive.same_shot_counts)
                and np.array_equal(fast.mixed_counts, naive.mixed_counts)):
            mismatches += 1
        if trial % 50 == 0:
            par = pair_histogram(shots, spec, engine="fast", mixing_factor=mixing, n_jobs=2)
            if not (np.array_equal(par.same_shot_counts, fast.same_shot_counts)
                    and np.array_equal(par.mixed_counts, fast.mixed_counts)):
                parallel_mismatches += 1
    ok = mismatches == 0 and parallel_mismatches == 0
    record(
        8, "correlator oracle", ok,
        f"{mismatches} fast/naive and {parallel_mismatches} parallel/sequential mismatches "
        f"over 1000 instances (largest {largest} events)",
    )
    assert mismatches == 0
    assert parallel_mismatches == 0


# --------------------------------------------------------------------------
# 9. determinism


CLI_CONFIGS = {
    "hbt_boson": "experiment: hbt_boson\nn_shots: 150\nsource:\n  sampler: modes\n",
    "hbt_boson_spectral": "experiment: hbt_boson\nn_shots: 150\nsource:\n  sampler: spectral\n",
    "hbt_fermion": "experiment: hbt_fermion\nn_shots: 150\n",
    "halo": "experiment: halo\nn_shots: 150\nhalo:\n  mean_pairs_per_shot: 50\n  colinear_multiplicity: 2.0\n",
    "fano_demo": "experiment: fano_demo\nn_shots: 150\ndetector:\n  quantum_efficiency: 1.0\n",
}


def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "atomcorr.cli", *args], cwd=cwd, capture_output=True, text=True)


def test_criterion_09_determinism(tmp_path):
    identical = []
    for name, text in CLI_CONFIGS.items():
        cfg = tmp_path / f"{name}.yaml"
        cfg.write_text(text)
        blobs = []
        for jobs in (1, 3):
            out = tmp_path / f"{name}_{jobs}.csv"
            res = _cli("simulate", "--config", str(cfg), "--seed", "9", "--n-jobs", str(jobs),
                       "--output", str(out), "--summary", str(tmp_path / f"{name}_{jobs}.txt"), "-q", cwd=tmp_path)
            assert res.returncode == 0, res.stderr
            blobs.append(out.read_bytes())
        identical.append(blobs[0] == blobs[1] and len(blobs[0]) > 0)
    ok = all(identical)
    record(9, "determinism", ok, f"{sum(identical)}/{len(identical)} experiments byte-identical with 1 vs 3 workers")
    assert ok


# --------------------------------------------------------------------------
# 10. Fano oracle


def test_criterion_10_fano_oracle():
    boson = fano_joint_probability(Statistics.BOSON, 0.0, 0.0, 0.0, 0.0)
    fermion = fano_joint_probability(Statistics.FERMION, 0.0, 0.0, 0.0, 0.0)
    rng = np.random.default_rng(20)
    phases = rng.uniform(0.0, 2 * np.pi, (4, 100_000))
    averages = [float(np.mean(fano_joint_probability(s, *phases))) for s in Statistics]
    ok = boson == 2.0 and fermion == 0.0 and all(abs(a - 1.0) <= 0.01 for a in averages)
    record(
        10, "Fano oracle", ok,
        f"zero phase boson={boson:g} fermion={fermion:g}; random-phase means "
        f"{', '.join(f'{a:.4f}' for a in averages)} (1.0+/-0.01)",
    )
    assert boson == 2.0
    assert fermion == 0.0
    assert all(abs(a - 1.0) <= 0.01 for a in averages)
