"""Tests for the semi-analytic cooling-temperature theory.

Oracles used here, in decreasing order of weight:

* A brute-force midpoint-rule tensor quadrature of the full energy-balance
  integral on a dense fixed grid, written independently below in smooth polar
  coordinates (the package uses nested adaptive Gauss panels in a different
  coordinate decomposition).
* ``scipy.integrate.quad`` on the one-dimensional velocity integral that the
  full expression reduces to for a uniform beam with no offset and no
  rotation, times the analytic ellipsoid volume.
* The closed-form small-velocity Doppler balance.  Expanding the energy
  balance to first order in ``k u / gamma0`` for a uniform beam (no offset,
  no rotation, weak saturation) gives the equilibrium
  ``k_B T = 5 hbar gamma0 (1 + w^2) / (24 |w|)`` with ``w = 2 Delta/gamma0``,
  which at optimal detuning ``w = -1`` is ``(5/12) hbar gamma0 / k_B`` --
  within a factor two of the textbook Doppler limit ``hbar gamma0 / 2 k_B``.
* Hand-evaluated recoil-heating arithmetic from literal constants.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import quad

from penningmd.constants import HBAR, KB
from penningmd.cooltheory import (
    CoolingTheoryParams,
    NoEquilibriumError,
    QuadratureError,
    de_dt,
    equilibrium_temperature,
    recoil_heating,
    temperature_map,
)
from penningmd.equilibrium import cold_fluid_density, predicted_shape
from penningmd.model import be9

V_MAX = 8.0


def beam_params(trap, n, **overrides):
    base = dict(
        s_perp=0.5,
        detuning_perp=2 * np.pi * 8e6,
        offset=5e-6,
        w_y=10e-6,
        w_z=40e-6,
        s_par=0.0,
    )
    base.update(overrides)
    return CoolingTheoryParams.for_crystal(trap, n, **base)


def brute_force_de_dt(u, p, include_wall_torque=True, n_phi=320, n_theta=800, n_v=3600):
    """Midpoint-rule tensor quadrature of the energy-balance integral.

    Uses polar coordinates on the ellipsoid cross-section disk,
    ``(y, z) = (a_y r cos t, a_z r sin t)`` with ``r = sin(phi)``, in which the
    chord length ``2 a_x sqrt(1 - r^2) = 2 a_x cos(phi)`` and the area element
    ``a_y a_z r dr dt`` are smooth, so the fixed midpoint grid converges
    quadratically.  Entirely independent of the package's nested adaptive
    Gauss-panel scheme.
    """
    a_x, a_y, a_z = p.semi_axes
    gamma_half = 0.5 * p.linewidth
    phi = (np.arange(n_phi) + 0.5) * (np.pi / 2) / n_phi
    theta = (np.arange(n_theta) + 0.5) * (2 * np.pi) / n_theta
    v = -V_MAX + (np.arange(n_v) + 0.5) * (2 * V_MAX) / n_v
    cell = ((np.pi / 2) / n_phi) * (2 * np.pi / n_theta) * (2 * V_MAX / n_v)

    total = 0.0
    for ph in phi:
        r = np.sin(ph)
        y = a_y * r * np.cos(theta)
        z = a_z * r * np.sin(theta)
        g = np.exp(-(((y - p.offset) / p.w_y) ** 2) - (z / p.w_z) ** 2)
        big_a = (p.detuning_perp - p.wavenumber * p.omega_r * y) / gamma_half
        big_b = p.wavenumber * u / gamma_half
        shift = (
            np.full_like(y, p.recoil_velocity)
            if include_wall_torque
            else p.recoil_velocity + p.omega_r * y
        ) / u
        f = (
            (v[None, :] + shift[:, None])
            * np.exp(-(v[None, :] ** 2))
            * g[:, None]
            / (1.0 + 2.0 * p.s_perp * g[:, None] + (big_a[:, None] - big_b * v[None, :]) ** 2)
        )
        chord = 2.0 * a_x * np.cos(ph)
        total += np.sin(ph) * np.cos(ph) * chord * f.sum() * cell
    total *= a_y * a_z
    prefactor = p.linewidth * p.s_perp * p.density * HBAR * p.wavenumber / np.sqrt(np.pi)
    return float(prefactor * u * total)


# ----------------------------------------------------------------- de_dt


def test_de_dt_zero_for_zero_beam_intensity(trap):
    p = beam_params(trap, 200, s_perp=0.0)
    assert de_dt(0.5, p) == 0.0
    assert de_dt(50.0, p) == 0.0


def test_de_dt_negative_for_idealized_red_detuned_beam(trap):
    """Uniform red-detuned beam with no recoil, offset, or rotation only cools."""
    p = beam_params(
        trap,
        200,
        w_y=math.inf,
        w_z=math.inf,
        offset=0.0,
        detuning_perp=-0.5 * be9().linewidth,
        s_perp=0.1,
    )
    p = replace(p, omega_r=0.0, recoil_velocity=0.0)
    for u in (0.03, 0.3, 3.0, 30.0, 300.0):
        assert de_dt(u, p) < 0.0


def test_de_dt_rejects_nonpositive_u(trap):
    p = beam_params(trap, 200)
    with pytest.raises(ValueError, match="positive"):
        de_dt(0.0, p)
    with pytest.raises(ValueError, match="positive"):
        de_dt(-1.0, p)


def test_de_dt_matches_brute_force_quadrature(trap):
    """Adaptive nested quadrature agrees with a dense midpoint grid.

    u values sit on the heating (1.0 m/s) and cooling (12 m/s) sides of the
    balance, away from the zero crossing where cancellation would amplify the
    oracle's own grid error.
    """
    p = beam_params(trap, 200)
    for u in (1.0, 12.0):
        mine = de_dt(u, p)
        brute = brute_force_de_dt(u, p)
        assert mine != 0.0
        assert abs(mine - brute) / abs(brute) < 1e-4


def test_de_dt_without_wall_work_matches_brute_force(trap):
    p = beam_params(trap, 200)
    for u in (1.0, 12.0):
        mine = de_dt(u, p, include_wall_torque=False)
        brute = brute_force_de_dt(u, p, include_wall_torque=False, n_phi=240, n_theta=400, n_v=2400)
        assert abs(mine - brute) / abs(brute) < 1e-4


def test_de_dt_self_convergence(trap):
    """Loose- and tight-tolerance evaluations agree within the loose target."""
    p = beam_params(trap, 200)
    loose = de_dt(1.0, p, rel_tol=1e-5)
    tight = de_dt(1.0, p, rel_tol=1e-10)
    assert abs(loose - tight) / abs(tight) < 1e-4


def test_uniform_beam_limit_matches_direct_velocity_quadrature(trap):
    """With a uniform beam, no offset, and no rotation the spatial integrals
    reduce to the ellipsoid volume times a single velocity integral, evaluated
    here with scipy's QUADPACK."""
    p = beam_params(
        trap,
        200,
        w_y=math.inf,
        w_z=math.inf,
        offset=0.0,
        detuning_perp=-0.5 * be9().linewidth,
        s_perp=0.01,
    )
    p = replace(p, omega_r=0.0)
    volume = 4.0 * np.pi / 3.0 * np.prod(p.semi_axes)
    gamma_half = 0.5 * p.linewidth
    for u in (0.5, 2.0):
        big_a = p.detuning_perp / gamma_half
        big_b = p.wavenumber * u / gamma_half
        shift = p.recoil_velocity / u

        def integrand(v):
            return (v + shift) * np.exp(-v * v) / (
                1.0 + 2.0 * p.s_perp + (big_a - big_b * v) ** 2
            )

        iv = quad(integrand, -V_MAX, V_MAX, epsabs=1e-18, epsrel=1e-12, limit=200)[0]
        oracle = (
            p.linewidth * p.s_perp * p.density * HBAR * p.wavenumber / np.sqrt(np.pi)
        ) * u * volume * iv
        mine = de_dt(u, p)
        assert abs(mine - oracle) / abs(oracle) < 1e-9


def test_wide_beam_converges_to_uniform_limit(trap):
    """Finite but very wide waists reproduce the uniform-beam evaluation."""
    wide = beam_params(trap, 200, w_y=1e4, w_z=1e4)
    uniform = beam_params(trap, 200, w_y=math.inf, w_z=math.inf)
    for u in (0.7, 7.0):
        a = de_dt(u, wide)
        b = de_dt(u, uniform)
        assert abs(a - b) / abs(b) < 1e-9


def test_quadrature_failure_is_reported(trap):
    p = beam_params(trap, 200)
    with pytest.raises(QuadratureError, match="did not converge"):
        de_dt(12.0, p, rel_tol=1e-13, max_refinements=0)


# ----------------------------------------------------------------- recoil


def test_recoil_heating_zero_without_axial_beams(trap):
    assert recoil_heating(beam_params(trap, 1000, s_par=0.0)) == 0.0


def test_recoil_heating_linear_in_ion_count(trap):
    a = recoil_heating(beam_params(trap, 1000, s_par=5e-3))
    b = recoil_heating(beam_params(trap, 2000, s_par=5e-3))
    assert b == pytest.approx(2.0 * a, rel=1e-12)


def test_recoil_heating_hand_computed_value(trap):
    """Literal-constant arithmetic for S=5e-3, N=1000, two beams.

    gamma0 = 2 pi x 18 MHz, k = 2 pi / 313 nm, hbar = 1.054571817e-34 J s:
    scatter rate per beam gamma0 S N / (1 + S) = 5.6269e8 1/s, recoil energy
    (hbar k)^2 / 2m split over three axes, doubled for the beam pair.
    """
    p = beam_params(trap, 1000, s_par=5e-3)
    hbar = 1.054571817e-34
    gamma0 = 2.0 * math.pi * 18e6
    k = 2.0 * math.pi / 313e-9
    mass = p.species.mass
    per_beam = (gamma0 * 5e-3 * 1000 / (1 + 5e-3)) * (hbar * k) ** 2 / (2 * mass) / 3.0
    assert recoil_heating(p) > 0.0
    assert recoil_heating(p) == pytest.approx(2.0 * per_beam, rel=1e-8)


# ----------------------------------------------------------------- balance


def doppler_ideal_params(trap, s_perp=0.01):
    p = beam_params(
        trap,
        200,
        w_y=math.inf,
        w_z=math.inf,
        offset=0.0,
        detuning_perp=-0.5 * be9().linewidth,
        s_perp=s_perp,
    )
    return replace(p, omega_r=0.0)


def test_doppler_limit_recovered_for_idealized_beam(trap):
    """Optimal-detuning uniform-beam equilibrium lands on the Doppler scale.

    The closed-form small-velocity balance (module docstring of this file)
    predicts T = (5/12) hbar gamma0 / k_B = 0.360 mK at w = -1; corrections
    are O((k u / gamma0)^2) ~ 2% and O(s_perp).  The textbook Doppler limit
    hbar gamma0 / 2 k_B = 0.432 mK must bracket it within a factor of two.
    """
    p = doppler_ideal_params(trap)
    t_eq = equilibrium_temperature(p)
    doppler = HBAR * p.linewidth / (2.0 * KB)
    closed_form = 5.0 * HBAR * p.linewidth * 2.0 / (24.0 * KB)
    assert 0.5 * doppler < t_eq < 2.0 * doppler
    assert t_eq == pytest.approx(closed_form, rel=0.10)


def test_equilibrium_temperature_monotonic_in_axial_saturation(trap):
    p = beam_params(trap, 1000, w_y=2.48e-6, w_z=math.inf, detuning_perp=2 * np.pi * 13.6e6)
    temps = [
        equilibrium_temperature(replace(p, s_par=s)) for s in (0.0, 5e-3, 5e-2)
    ]
    assert temps[0] <= temps[1] <= temps[2]
    assert temps[2] > temps[0]


def test_energy_balance_strictly_decreasing_through_root(trap):
    """The stable balance crosses from heating to cooling as u grows.

    At small u the recoil term (positive) dominates; the Doppler cooling term
    grows like u^2, so dE/dt decreases strictly through a locally unique
    zero.  (Stability requires exactly this sign structure: below the root
    the crystal heats toward it, above the root it cools back.)
    """
    p = beam_params(trap, 1000, w_y=2.48e-6, w_z=math.inf, s_par=5e-3,
                    detuning_perp=2 * np.pi * 13.6e6)
    heating = recoil_heating(p)
    t_eq = equilibrium_temperature(p)
    u_eq = math.sqrt(2.0 * KB * t_eq / p.species.mass)
    samples = [de_dt(f * u_eq, p) + heating for f in (0.90, 0.95, 1.05, 1.10)]
    assert samples[0] > samples[1] > 0.0 > samples[2] > samples[3]


def test_wall_work_term_changes_prediction(trap):
    """Dropping the rotation-work term visibly changes the energy balance.

    At the rotation rates studied the local flow velocity at the beam offset
    Doppler-shifts the resonance by tens of linewidths, so the folded
    -omega_r hbar k y work term is what makes the offset beam cool at all:
    without it the balance never crosses zero.
    """
    p = beam_params(trap, 1000, w_y=2.48e-6, w_z=math.inf, s_par=5e-3,
                    detuning_perp=2 * np.pi * 13.6e6)
    heating = recoil_heating(p)
    u_probe = 1.5
    with_wall = de_dt(u_probe, p)
    without_wall = de_dt(u_probe, p, include_wall_torque=False)
    assert abs(without_wall - with_wall) > 10.0 * abs(with_wall)

    probes = np.geomspace(1e-3, 1e3, 25)
    signs = {
        np.sign(de_dt(u, p, include_wall_torque=False) + heating) for u in probes
    }
    assert signs == {1.0}  # pure heating: no equilibrium anywhere in the bracket


def test_no_equilibrium_for_runaway_heating(trap):
    """A vanishingly weak planar beam cannot balance axial recoil heating."""
    p = beam_params(trap, 1000, w_y=2.48e-6, w_z=math.inf, s_par=5e-3,
                    detuning_perp=2 * np.pi * 13.6e6, s_perp=1e-6)
    with pytest.raises(NoEquilibriumError, match="no equilibrium"):
        equilibrium_temperature(p)


def test_no_equilibrium_for_runaway_cooling(trap):
    """With recoil removed entirely the balance is negative everywhere."""
    p = replace(doppler_ideal_params(trap, s_perp=0.1), recoil_velocity=0.0)
    with pytest.raises(NoEquilibriumError, match="runaway"):
        equilibrium_temperature(p)


# ----------------------------------------------------------------- params


def test_params_validation(trap):
    good = beam_params(trap, 200)
    with pytest.raises(ValueError, match="density"):
        replace(good, density=0.0)
    with pytest.raises(ValueError, match="semi_axes"):
        replace(good, semi_axes=(1e-5, -1e-5, 1e-5))
    with pytest.raises(ValueError, match="n_ions"):
        replace(good, n_ions=0)
    with pytest.raises(ValueError, match="widths"):
        replace(good, w_y=0.0)
    with pytest.raises(ValueError, match="saturation"):
        replace(good, s_perp=-0.1)
    with pytest.raises(ValueError, match="omega_r"):
        replace(good, omega_r=-1.0)


def test_params_for_crystal_pulls_equilibrium_shape(trap):
    p = beam_params(trap, 500)
    assert p.density == cold_fluid_density(trap)
    assert p.semi_axes == tuple(predicted_shape(trap, 500).semi_axes_xyz)
    assert p.omega_r == trap.omega_r
    assert p.n_ions == 500
    assert p.wavenumber == trap.species.k_photon
    assert p.linewidth == trap.species.linewidth
    assert p.recoil_velocity == pytest.approx(
        5.0 * HBAR * trap.species.k_photon / (6.0 * trap.species.mass), rel=1e-14
    )


# ----------------------------------------------------------------- map


def test_temperature_map_single_cell_matches_direct_call(trap):
    p = beam_params(trap, 1000, w_z=math.inf, s_par=5e-3)
    w_y, det = 2.48e-6, 2 * np.pi * 13.6e6
    cell = temperature_map([w_y], [det], p)
    direct = equilibrium_temperature(replace(p, w_y=w_y, detuning_perp=det))
    assert cell.shape == (1, 1)
    assert cell[0, 0] == direct


def test_temperature_map_invariant_under_grid_reordering(trap):
    p = beam_params(trap, 1000, w_z=math.inf, s_par=5e-3)
    w_ys = np.array([2.48e-6, 9.9e-6, 4.9e-6])
    dets = 2 * np.pi * np.array([13.6e6, 5e6])
    base = temperature_map(w_ys, dets, p)
    shuffled = temperature_map(w_ys[::-1], dets[::-1], p)
    np.testing.assert_array_equal(shuffled, base[::-1, ::-1])


def test_temperature_map_marks_cells_without_equilibrium(trap):
    """A detuning blue of the Doppler shift anywhere in the crystal heats
    every ion, so that column has no equilibrium and is marked absent."""
    p = beam_params(trap, 1000, w_z=math.inf, s_par=5e-3)
    cells = temperature_map(
        [2.48e-6], 2 * np.pi * np.array([13.6e6, 700e6]), p
    )
    assert np.isfinite(cells[0, 0])
    assert np.isnan(cells[0, 1])


def test_temperature_map_structure_matches_reported_cold_region(trap):
    """Desk-scale map over the studied waist/detuning ranges.

    The published scan of this parameter plane reports planar temperatures
    reaching below 2 mK for favorable (small) waists with matched detunings
    and tens of mK in the unfavorable corner; the example cell
    (2.48 um, 2 pi x 13.6 MHz) sits in the cold region.
    """
    p = beam_params(trap, 1000, w_z=math.inf, s_par=5e-3)
    w_ys = np.geomspace(1.24e-6, 19.8e-6, 8)
    dets = 2 * np.pi * np.linspace(2e6, 30e6, 8)
    cells = temperature_map(w_ys, dets, p)
    assert np.all(np.isfinite(cells))
    assert np.nanmin(cells) < 2e-3
    assert np.nanmax(cells) > 10e-3
    # cold cells concentrate at small waists: every sub-2-mK cell in the
    # bottom half of the waist range
    cold_rows = np.where(cells < 2e-3)[0]
    assert cold_rows.size > 0
    assert cold_rows.max() <= 3
    example = equilibrium_temperature(
        replace(p, w_y=2.48e-6, detuning_perp=2 * np.pi * 13.6e6)
    )
    assert example < 2e-3


def test_temperature_map_rejects_empty_grid(trap):
    p = beam_params(trap, 1000)
    with pytest.raises(ValueError, match="non-empty"):
        temperature_map([], [2 * np.pi * 1e6], p)
