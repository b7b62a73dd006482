"""Laser-beam model checks against closed forms and statistics.

The scattering rate is validated by direct substitution and grid scans,
photon statistics against Poisson moments, recoil kicks against exact
norms / Monte Carlo means / sphere-isotropy chi-squared, and the full
kick sampler against a steady-state temperature computed independently
from the stationary 1D Fokker-Planck distribution of the same rate
function.
"""

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid, trapezoid

from penningmd import lasers
from penningmd.constants import HBAR, KB
from penningmd.model import IonState, be9


def _uniform_beam(khat, detuning, s_peak, species=None):
    sp = species or be9()
    return lasers.BeamConfig(khat=np.asarray(khat, dtype=float),
                             wavenumber=sp.k_photon, detuning=detuning,
                             s_peak=s_peak, linewidth=sp.linewidth)


def _gaussian_beam(detuning, s_peak, d, w_y, w_z, species=None):
    sp = species or be9()
    return lasers.BeamConfig(khat=np.array([1.0, 0.0, 0.0]),
                             wavenumber=sp.k_photon, detuning=detuning,
                             s_peak=s_peak, linewidth=sp.linewidth,
                             profile="gaussian2d", offset=d,
                             waist_y=w_y, waist_z=w_z)


# ---------------------------------------------------------------------------
# saturation profiles

def test_saturation_uniform_everywhere(rng):
    beam = _uniform_beam([0, 0, 1], 0.0, 0.7)
    pos = rng.normal(size=(50, 3)) * 1e-3
    assert np.all(lasers.saturation(beam, pos) == 0.7)


def test_saturation_gaussian_peak_and_waist():
    d, w_y, w_z = 5e-6, 10e-6, 40e-6
    beam = _gaussian_beam(0.0, 0.5, d, w_y, w_z)
    assert lasers.saturation(beam, np.array([3e-3, d, 0.0])) == pytest.approx(0.5)
    at_waist = lasers.saturation(beam, np.array([0.0, d + w_y, 0.0]))
    assert at_waist == pytest.approx(0.5 / np.e)
    at_z_waist = lasers.saturation(beam, np.array([0.0, d, w_z]))
    assert at_z_waist == pytest.approx(0.5 / np.e)


def test_beam_validation():
    sp = be9()
    with pytest.raises(ValueError, match="khat"):
        _uniform_beam([0, 0, 0], 0.0, 0.5)
    with pytest.raises(ValueError, match="s_peak"):
        _uniform_beam([0, 0, 1], 0.0, -0.1)
    with pytest.raises(ValueError, match="waist"):
        lasers.BeamConfig(khat=np.array([1.0, 0, 0]), wavenumber=sp.k_photon,
                          detuning=0.0, s_peak=0.5, linewidth=sp.linewidth,
                          profile="gaussian2d", offset=5e-6)
    with pytest.raises(ValueError, match="profile"):
        lasers.BeamConfig(khat=np.array([1.0, 0, 0]), wavenumber=sp.k_photon,
                          detuning=0.0, s_peak=0.5, linewidth=sp.linewidth,
                          profile="tophat")
    # direction is normalized on construction
    beam = _uniform_beam([0, 0, 2.0], 0.0, 0.5)
    assert np.allclose(beam.khat, [0, 0, 1])


# ---------------------------------------------------------------------------
# scattering rate

def test_rate_resonant_substitution():
    # Delta = 0, v = 0, S = 0.5: rate = S g0 (g0/2)^2 / [(g0/2)^2 (1+2S)]
    beam = _uniform_beam([1, 0, 0], 0.0, 0.5)
    rate = lasers.scattering_rate(beam, np.zeros(3), np.zeros(3))
    assert rate == pytest.approx(0.25 * beam.linewidth, rel=1e-12)


def test_rate_weak_field_half_linewidth_detuning():
    g0 = be9().linewidth
    beam = _uniform_beam([1, 0, 0], -0.5 * g0, 1e-8)
    rate = lasers.scattering_rate(beam, np.zeros(3), np.zeros(3))
    assert rate == pytest.approx(beam.s_peak * g0 / 2.0, rel=1e-6)


def test_rate_maximized_at_doppler_resonance():
    g0 = be9().linewidth
    beam = _uniform_beam([1, 0, 0], -0.5 * g0, 0.5)
    v_star = beam.detuning / beam.wavenumber
    v = np.zeros((20001, 3))
    v[:, 0] = np.linspace(-30.0, 30.0, 20001)
    rates = lasers.scattering_rate(beam, np.zeros_like(v), v)
    arg = np.argmax(rates)
    dv = 60.0 / 20000
    assert abs(v[arg, 0] - v_star) <= 2 * dv
    peak = beam.s_peak * g0 / (1.0 + 2.0 * beam.s_peak)
    assert rates[arg] == pytest.approx(peak, rel=1e-6)


def test_rate_saturation_ceiling_and_positivity(rng):
    g0 = be9().linewidth
    beam = _uniform_beam([0, 1, 0], 0.3 * g0, 1e8)
    rate = lasers.scattering_rate(beam, np.zeros(3), np.zeros(3))
    assert rate <= 0.5 * g0
    assert rate == pytest.approx(0.5 * g0, rel=1e-6)
    for _ in range(200):
        b = _uniform_beam(rng.normal(size=3), rng.normal() * g0,
                          10.0 ** rng.uniform(-4, 3))
        r = lasers.scattering_rate(b, rng.normal(size=3),
                                   rng.normal(size=3) * 30.0)
        assert 0.0 < r <= 0.5 * g0 * (1 + 1e-12)


# ---------------------------------------------------------------------------
# photon statistics

def test_sample_photons_zero_rate(rng):
    assert lasers.sample_photons(0.0, 1e-8, rng) == 0
    counts = lasers.sample_photons(np.zeros(1000), 1e-8, rng)
    assert np.all(counts == 0)
    with pytest.raises(ValueError, match="mean"):
        lasers.sample_photons(-1.0, 1e-8, rng)


def test_sample_photons_poisson_moments(rng):
    mean = 0.01
    counts = lasers.sample_photons(np.full(10 ** 6, mean), 1.0, rng)
    sigma = np.sqrt(mean / 10 ** 6)
    assert abs(counts.mean() - mean) < 5 * sigma
    # single absorptions dominate: P(n >= 2) / P(1) ~ mean / 2
    p1 = np.mean(counts == 1)
    p2 = np.mean(counts >= 2)
    assert p2 / p1 == pytest.approx(mean / 2.0, abs=3.5e-3)


# ---------------------------------------------------------------------------
# recoil kicks

def test_recoil_zero_photons(rng):
    beam = _uniform_beam([1, 0, 0], 0.0, 0.5)
    assert np.all(recoil := lasers.recoil_kick(beam, 0, rng, be9().mass) == 0)
    with pytest.raises(ValueError, match="nonnegative"):
        lasers.recoil_kick(beam, -1, rng, be9().mass)


def test_recoil_single_photon_exact_norm(rng):
    sp = be9()
    beam = _uniform_beam([0, 1, 0], 0.0, 0.5, sp)
    v_rec = HBAR * sp.k_photon / sp.mass
    dv = lasers.recoil_kick(beam, 1, rng, sp.mass)
    # absorption part is fixed; emission lies exactly on the recoil sphere
    emit = dv - v_rec * beam.khat
    assert np.linalg.norm(emit) == pytest.approx(v_rec, rel=1e-12)


def test_recoil_mean_is_absorption_momentum(rng):
    sp = be9()
    beam = _uniform_beam([1, 0, 0], 0.0, 0.5, sp)
    v_rec = HBAR * sp.k_photon / sp.mass
    n = 10 ** 6
    mean_dv = lasers.recoil_kick(beam, n, rng, sp.mass) / n
    sigma = v_rec / np.sqrt(3.0 * n)
    assert np.all(np.abs(mean_dv - v_rec * beam.khat) < 5 * sigma)


def test_emission_isotropy_octant_chi2(rng):
    q = lasers.sample_emission(10 ** 6, rng)
    assert np.max(np.abs(np.linalg.norm(q, axis=1) - 1.0)) < 1e-12
    octant = ((q[:, 0] > 0).astype(int) + 2 * (q[:, 1] > 0)
              + 4 * (q[:, 2] > 0))
    counts = np.bincount(octant, minlength=8)
    expected = len(q) / 8.0
    chi2 = np.sum((counts - expected) ** 2 / expected)
    # chi-square, 7 dof: mean 7, sd sqrt(14); 5-sigma ceiling
    assert chi2 < 7 + 5 * np.sqrt(14.0)


# ---------------------------------------------------------------------------
# standard setup

def test_standard_setup_geometry():
    sp = be9()
    beams = lasers.standard_setup(sp, delta_perp=2 * np.pi * 10e6,
                                  w_y=10e-6, w_z=50e-6)
    assert len(beams) == 3
    up, down, planar = beams
    assert np.allclose(up.khat, [0, 0, 1]) and np.allclose(down.khat, [0, 0, -1])
    for b in (up, down):
        assert b.profile == "uniform"
        assert b.s_peak == pytest.approx(5e-3)
        assert b.detuning == pytest.approx(-0.5 * sp.linewidth)
    assert planar.profile == "gaussian2d"
    assert planar.offset == pytest.approx(5e-6)
    assert planar.s_peak == pytest.approx(0.5)
    assert planar.detuning == pytest.approx(2 * np.pi * 10e6)
    # symmetric axial pair: equal rates at rest, opposite directions
    r_up = lasers.scattering_rate(up, np.zeros(3), np.zeros(3))
    r_down = lasers.scattering_rate(down, np.zeros(3), np.zeros(3))
    assert r_up == pytest.approx(r_down, rel=1e-14)
    assert np.allclose(up.khat, -down.khat)


def test_standard_setup_corotating_reference():
    sp = be9()
    omega_r = 2 * np.pi * 530e3
    d = 5e-6
    delta = -0.5 * sp.linewidth
    beams = lasers.standard_setup(sp, delta_perp=delta, w_y=10e-6, w_z=50e-6,
                                  d=d, detuning_reference="corotating",
                                  omega_r=omega_r)
    assert beams[2].detuning == pytest.approx(delta + sp.k_photon * omega_r * d)
    with pytest.raises(ValueError, match="omega_r"):
        lasers.standard_setup(sp, delta_perp=delta, w_y=10e-6, w_z=50e-6,
                              detuning_reference="corotating")
    with pytest.raises(ValueError, match="detuning_reference"):
        lasers.standard_setup(sp, delta_perp=delta, w_y=10e-6, w_z=50e-6,
                              detuning_reference="labframe")


def test_planar_beam_resonant_for_comoving_ion_at_offset():
    sp = be9()
    delta = 2 * np.pi * 10e6
    d = 5e-6
    beams = lasers.standard_setup(sp, delta_perp=delta, w_y=10e-6, w_z=50e-6, d=d)
    planar = beams[2]
    pos = np.array([0.0, d, 0.0])
    vel = np.array([delta / planar.wavenumber, 0.0, 0.0])
    rate = lasers.scattering_rate(planar, pos, vel)
    peak = planar.s_peak * sp.linewidth / (1.0 + 2.0 * planar.s_peak)
    assert rate == pytest.approx(peak, rel=1e-12)


# ---------------------------------------------------------------------------
# kick sampler

def test_sample_kicks_no_beams_is_zero(trap, rng):
    state = IonState(np.zeros((5, 3)), np.zeros((5, 3)))
    dv = lasers.sample_kicks(state, [], 1e-9, trap, rng)
    assert dv.shape == (5, 3) and np.all(dv == 0)


def test_sample_kicks_deterministic_with_seed(trap):
    beams = lasers.standard_setup(trap.species, delta_perp=2 * np.pi * 5e6,
                                  w_y=10e-6, w_z=50e-6)
    state = IonState(np.zeros((40, 3)), np.zeros((40, 3)))
    dv1 = lasers.sample_kicks(state, beams, 1e-8, trap,
                              np.random.default_rng(99))
    dv2 = lasers.sample_kicks(state, beams, 1e-8, trap,
                              np.random.default_rng(99))
    assert np.array_equal(dv1, dv2)


def test_sample_kicks_mean_matches_rate(trap, rng):
    sp = trap.species
    beam = _uniform_beam([1, 0, 0], 0.0, 0.5, sp)
    rate = 0.25 * sp.linewidth
    v_rec = HBAR * sp.k_photon / sp.mass
    n_ions, n_steps, dt = 2000, 50, 1e-9
    state = IonState(np.zeros((n_ions, 3)), np.zeros((n_ions, 3)))
    total = np.zeros(3)
    for _ in range(n_steps):
        total += lasers.sample_kicks(state, [beam], dt, trap, rng).sum(axis=0)
    events = n_ions * n_steps * rate * dt
    expect_x = events * v_rec
    # compound-Poisson sd: sqrt(events * <(1+q_x)^2>) and sqrt(events/3) transverse
    sd_x = v_rec * np.sqrt(events * (1.0 + 1.0 / 3.0))
    sd_t = v_rec * np.sqrt(events / 3.0)
    assert abs(total[0] - expect_x) < 5 * sd_x
    assert abs(total[1]) < 5 * sd_t and abs(total[2]) < 5 * sd_t


def test_axial_beams_cool_to_doppler_scale_temperature(trap):
    """Free-ion velocity MC under the symmetric axial pair vs 1D theory.

    The independent oracle is the stationary distribution of the 1D
    Fokker-Planck equation built from the same rate formula: drift
    A(v) = v_rec (g+ - g-), diffusion D(v) = v_rec^2 (g+ + g-)(1 + 1/3)/2
    (absorption shot noise plus isotropic emission projected on z), whose
    steady state is p(v) ~ exp(int A/D) / D.
    """
    sp = trap.species
    g0 = sp.linewidth
    m = sp.mass
    v_rec = HBAR * sp.k_photon / m
    s0 = 0.3
    up = _uniform_beam([0, 0, 1], -0.5 * g0, s0, sp)
    down = _uniform_beam([0, 0, -1], -0.5 * g0, s0, sp)

    # Fokker-Planck steady-state temperature
    v = np.linspace(-12.0, 12.0, 4001)
    vel = np.zeros((v.size, 3))
    vel[:, 2] = v
    pos = np.zeros_like(vel)
    g_up = lasers.scattering_rate(up, pos, vel)
    g_dn = lasers.scattering_rate(down, pos, vel)
    drift = v_rec * (g_up - g_dn)
    diff = 0.5 * v_rec ** 2 * (g_up + g_dn) * (1.0 + 1.0 / 3.0)
    log_p = cumulative_trapezoid(drift / diff, v, initial=0.0)
    p = np.exp(log_p - log_p.max()) / diff
    p /= trapezoid(p, v)
    t_fp = m * trapezoid(p * v * v, v) / KB

    # Monte Carlo with the production sampler, velocities only (free ion)
    n_ions, dt = 128, 2e-8
    n_burn, n_meas = 50_000, 100_000
    rng = np.random.default_rng(2024)
    state = IonState(np.zeros((n_ions, 3)), np.zeros((n_ions, 3)))
    state.velocities[:, 2] = rng.normal(size=n_ions) * np.sqrt(KB * t_fp / m)
    acc, count = 0.0, 0
    for i in range(n_burn + n_meas):
        state.velocities += lasers.sample_kicks(state, [up, down], dt,
                                                trap, rng)
        if i >= n_burn:
            acc += np.mean(state.velocities[:, 2] ** 2)
            count += 1
    t_mc = m * (acc / count) / KB

    assert t_mc == pytest.approx(t_fp, rel=0.35)
    t_doppler = lasers.doppler_temperature(g0)
    assert 0.5 * t_doppler < t_mc < 2.0 * t_doppler
