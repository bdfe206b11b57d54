import numpy as np
import pytest
from scipy import stats

from atomcorr.core import DetectorConfig, PhysicalConstants, TofConfig
from atomcorr.detector import IdealAtoms, apply_detector, propagate_to_detector
from atomcorr._validation import DataError


def atoms(n, rng, scale=1e-3):
    return IdealAtoms(0, "position", rng.normal(0.0, scale, (n, 3)))


def test_ideal_detector_is_identity():
    rng = np.random.default_rng(1)
    a = atoms(500, rng)
    shot = apply_detector(a, DetectorConfig.ideal(), rng)
    got = shot.positions()
    order = np.argsort(a.values[:, 2], kind="stable")
    assert np.allclose(got, a.values[order], rtol=0, atol=1e-15)
    assert shot.provenance["n_detected"] == 500


def test_efficiency_thinning_is_binomial():
    rng = np.random.default_rng(2)
    n, qe = 200_000, 0.05
    cfg = DetectorConfig(quantum_efficiency=qe, sigma_t=0, sigma_xy=0, aperture_diameter=np.inf)
    kept = apply_detector(atoms(n, rng), cfg, rng).provenance["n_after_efficiency"]
    assert abs(kept - n * qe) < 5 * np.sqrt(n * qe * (1 - qe))


def test_thinning_preserves_independence_of_atoms():
    # each atom survives independently: counts per octant stay binomial
    rng = np.random.default_rng(3)
    a = atoms(80_000, rng)
    cfg = DetectorConfig(quantum_efficiency=0.3, sigma_t=0, sigma_xy=0, aperture_diameter=np.inf)
    shot = apply_detector(a, cfg, rng)
    octant = (shot.x > 0).astype(int) + 2 * (shot.y > 0) + 4 * (shot.z_equiv > 0)
    counts = np.bincount(octant, minlength=8)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_blur_has_requested_rms():
    rng = np.random.default_rng(4)
    a = IdealAtoms(0, "position", np.zeros((50_000, 3)))
    cfg = DetectorConfig(quantum_efficiency=1.0, sigma_xy=2e-4, sigma_t=1e-6, v_arrival=3.0,
                         aperture_diameter=np.inf, v_spread_fraction=0.0)
    shot = apply_detector(a, cfg, rng)
    assert np.std(shot.x) == pytest.approx(2e-4, rel=0.02)
    assert np.std(shot.z_equiv) == pytest.approx(3e-6, rel=0.02)


def test_blur_preserves_means():
    rng = np.random.default_rng(7)
    n = 40_000
    a = IdealAtoms(0, "position", rng.normal(0.0, 1e-3, (n, 3)) + [2e-3, -1e-3, 5e-4])
    cfg = DetectorConfig(quantum_efficiency=1.0, sigma_xy=5e-4, sigma_t=2e-4, v_arrival=3.0,
                         aperture_diameter=np.inf, v_spread_fraction=0.0)
    shot = apply_detector(a, cfg, rng)
    for got, want, blur in ((shot.x, a.values[:, 0], 5e-4), (shot.z_equiv, a.values[:, 2], 6e-4)):
        assert abs(got.mean() - want.mean()) < 4 * blur / np.sqrt(n)


def test_aperture_clips_outside_atoms():
    pos = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [0.0, -0.039, 0.0]])
    cfg = DetectorConfig(quantum_efficiency=1.0, sigma_t=0, sigma_xy=0, aperture_diameter=0.08)
    shot = apply_detector(IdealAtoms(0, "position", pos), cfg, np.random.default_rng(0))
    assert len(shot) == 2 and shot.provenance["n_clipped"] == 1


def test_velocity_spread_error_is_bounded():
    rng = np.random.default_rng(5)
    z = rng.uniform(-0.01, 0.01, 10_000)
    pos = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
    cfg = DetectorConfig(quantum_efficiency=1.0, sigma_t=0, sigma_xy=0, aperture_diameter=np.inf,
                         v_spread_fraction=0.005)
    shot = apply_detector(IdealAtoms(0, "position", pos), cfg, rng)
    zs = np.sort(z)
    rel = np.abs(np.sort(shot.z_equiv) - zs)
    assert np.all(rel <= 0.0051 * np.abs(zs) / (1 - 0.005) + 1e-15)


def test_dead_time_removes_close_hits_in_one_cell():
    # without blur the cells are 1 um wide; z = 3.5 m/s * t gives hits at
    # 0, 1 and 20 ns in one cell plus one hit elsewhere
    pos = np.array([[1.0005e-4, 1.0005e-4, 0.0], [1.0003e-4, 1.0002e-4, 3.5e-9],
                    [1.0005e-4, 1.0005e-4, 7e-8], [5e-3, 0.0, 3.5e-9]])
    cfg = DetectorConfig(quantum_efficiency=1.0, sigma_t=0, sigma_xy=0, aperture_diameter=np.inf,
                         v_spread_fraction=0.0, dead_time=1e-8)
    shot = apply_detector(IdealAtoms(0, "position", pos), cfg, np.random.default_rng(0))
    assert shot.provenance["n_dead_time"] == 1
    assert len(shot) == 3 and not np.any(shot.x == 1.0003e-4)


def test_propagation_scales_and_drops():
    c = PhysicalConstants()
    m = c.mass_he4
    p = np.array([[m * 1.0, 0.0, 0.0], [0.0, 0.0, m * 2.0]])
    out = propagate_to_detector(IdealAtoms(0, "momentum", p), TofConfig(0.5), c, m)
    assert out.representation == "position"
    assert np.allclose(out.values[0], [0.5, 0.0, -0.5 * c.gravity_g * 0.25])
    assert np.allclose(out.values[1], [0.0, 0.0, 1.0 - 0.5 * c.gravity_g * 0.25])
    flat = propagate_to_detector(IdealAtoms(0, "momentum", p), TofConfig(0.5, include_gravity=False), c, m)
    assert np.allclose(flat.values, p * 0.5 / m)
    with pytest.raises(ValueError):
        propagate_to_detector(out, TofConfig(0.5), c, m)


def test_ideal_atoms_validation():
    with pytest.raises(DataError):
        IdealAtoms(0, "position", np.zeros((3, 2)))
    with pytest.raises(ValueError):
        IdealAtoms(0, "velocity", np.zeros((3, 3)))
    with pytest.raises(ValueError):
        IdealAtoms(0, "position", np.zeros((3, 3)), labels=np.zeros(2))


def test_labels_follow_survivors():
    rng = np.random.default_rng(6)
    n = 1000
    pos = rng.normal(0, 1e-3, (n, 3))
    a = IdealAtoms(0, "position", pos, labels=np.arange(n) % 2, pair_id=np.arange(n))
    cfg = DetectorConfig(quantum_efficiency=0.5, sigma_t=0, sigma_xy=0, aperture_diameter=np.inf,
                         v_spread_fraction=0.0)
    shot = apply_detector(a, cfg, rng)
    pid = shot.provenance["pair_id"]
    assert np.allclose(shot.positions(), pos[pid], rtol=1e-12, atol=1e-15)
    assert np.array_equal(shot.provenance["labels"], pid % 2)
