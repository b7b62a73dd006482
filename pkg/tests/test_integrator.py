"""Integrator checks against exact maps and conservation laws.

The drift map is validated against closed-form special cases and exact
time reversal; full steps are validated against the analytic single-ion
orbit (an independent closed-form solution of the lab-frame equations of
motion) and against the conserved quantities of the wall-free dynamics.
"""

import numpy as np
import pytest
from scipy.optimize import minimize

from penningmd import coulomb
from penningmd import integrator as ig
from penningmd.model import (
    IonState,
    TrapConfig,
    be9,
    confinement_coefficients,
    energy_report,
    external_force,
    from_rotating_frame,
    rotating_potential_energy,
)


def _no_wall_trap() -> TrapConfig:
    return TrapConfig.from_frequencies(be9(), b_field=4.4588, f_z=1.58e6,
                                       delta=0.0, f_rot=530e3)


def _relaxed_crystal(n, cfg, rng, spread=10e-6):
    """Rotating-frame equilibrium positions via energy minimization.

    Nondimensionalized so the optimizer's absolute ftol/gtol thresholds are
    meaningful (raw energies are ~1e-21 J, far below scipy's floor of 1).
    """
    scale = 10e-6
    e_unit = cfg.species.mass * cfg.omega_z ** 2 * scale ** 2
    cx, cy, cz = confinement_coefficients(cfg)
    coef = cfg.species.mass * cfg.omega_z ** 2 * np.array([cx, cy, cz])
    q = cfg.species.charge

    def fun(s):
        pos = s.reshape(-1, 3) * scale
        u = rotating_potential_energy(pos, cfg)
        res = coulomb.direct_solve(coulomb.ChargeSystem(pos, q))
        grad = (coef * pos - q * res.efield) * (scale / e_unit)
        return u / e_unit, grad.ravel()

    s0 = rng.normal(size=(n, 3)) * (spread / scale)
    out = minimize(fun, s0.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": 20000, "gtol": 1e-9, "ftol": 1e-16})
    return out.x.reshape(-1, 3) * scale


def _thermal_lab_state(pos_rot, cfg, rng, vth):
    """Lab-frame state: relaxed crystal plus small thermal velocities."""
    vel = rng.normal(size=pos_rot.shape) * vth
    rot = IonState(pos_rot.copy(), vel, t=0.0, frame="rotating")
    return from_rotating_frame(rot, cfg)


def _analytic_single_ion(cfg, x0, v0, t):
    """Closed-form lab-frame orbit for one ion, wall off.

    Planar motion: u = x + i y obeys u'' = -i w_c u' + (w_z^2/2) u, a
    superposition of two clockwise circular modes exp(-i w t) with
    w = [w_c +- sqrt(w_c^2 - 2 w_z^2)]/2; axial motion is harmonic.
    """
    wc, wz = cfg.omega_c, cfg.omega_z
    disc = np.sqrt(wc * wc - 2.0 * wz * wz)
    wp, wm = 0.5 * (wc + disc), 0.5 * (wc - disc)
    u0 = x0[0] + 1j * x0[1]
    vu0 = v0[0] + 1j * v0[1]
    ap = (1j * vu0 - wm * u0) / (wp - wm)
    am = u0 - ap
    u = ap * np.exp(-1j * wp * t) + am * np.exp(-1j * wm * t)
    vu = -1j * (wp * ap * np.exp(-1j * wp * t)
                + wm * am * np.exp(-1j * wm * t))
    z = x0[2] * np.cos(wz * t) + v0[2] / wz * np.sin(wz * t)
    vz = -x0[2] * wz * np.sin(wz * t) + v0[2] * np.cos(wz * t)
    pos = np.array([u.real, u.imag, z])
    vel = np.array([vu.real, vu.imag, vz])
    return pos, vel


# ---------------------------------------------------------------------------
# drift map

def test_drift_full_period_closes_gyrocircle(trap):
    state = IonState([[1e-5, -2e-5, 3e-6]], [[40.0, -25.0, 11.0]])
    dt = 2.0 * np.pi / trap.omega_c
    out = ig.u0_drift(state, dt, trap)
    np.testing.assert_allclose(out.velocities, state.velocities,
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.positions[0, :2], state.positions[0, :2],
                               rtol=1e-12, atol=1e-18)
    assert out.positions[0, 2] == pytest.approx(
        state.positions[0, 2] + 11.0 * dt, rel=1e-14)
    assert out.t == pytest.approx(dt, rel=1e-14)


def test_drift_small_dt_taylor_limit(trap):
    v = np.array([[33.0, -12.0, 5.0]])
    state = IonState(np.zeros((1, 3)), v)
    dt = 1e-6 / trap.omega_c
    out = ig.u0_drift(state, dt, trap)
    # x <- x + v dt + O(dt^2): quadratic remainder ~ w_c dt^2 |v| / 2
    np.testing.assert_allclose(out.positions, v * dt,
                               atol=trap.omega_c * dt**2 * 40.0)


def test_drift_quarter_period_clockwise(trap):
    vx = 17.0
    state = IonState(np.zeros((1, 3)), [[vx, 0.0, 0.0]])
    dt = np.pi / (2.0 * trap.omega_c)
    out = ig.u0_drift(state, dt, trap)
    np.testing.assert_allclose(out.velocities[0], [0.0, -vx, 0.0],
                               atol=vx * 1e-12)
    np.testing.assert_allclose(out.positions[0],
                               [vx / trap.omega_c, -vx / trap.omega_c, 0.0],
                               rtol=1e-12, atol=1e-20)


def test_drift_time_reversal(trap, rng):
    state = IonState(rng.normal(size=(20, 3)) * 1e-5,
                     rng.normal(size=(20, 3)) * 30.0)
    dt = ig.default_dt(trap)
    back = ig.u0_drift(ig.u0_drift(state, dt, trap), -dt, trap)
    np.testing.assert_allclose(back.positions, state.positions,
                               rtol=1e-13, atol=1e-18)
    np.testing.assert_allclose(back.velocities, state.velocities,
                               rtol=1e-13, atol=1e-13)
    assert back.t == pytest.approx(0.0, abs=1e-22)


# ---------------------------------------------------------------------------
# kick

def test_kick_zero_force_identity(trap):
    state = IonState([[1e-5, 0, 0]], [[1.0, 2.0, 3.0]])
    out = ig.kick(state, 1e-9, trap, np.zeros((1, 3)))
    np.testing.assert_array_equal(out.velocities, state.velocities)
    np.testing.assert_array_equal(out.positions, state.positions)


def test_kick_uniform_field(trap):
    e0 = 12.5  # V/m along x
    q, m = trap.species.charge, trap.species.mass
    state = IonState(np.zeros((3, 3)), np.zeros((3, 3)))
    dt = 2e-9
    forces = np.tile([q * e0, 0.0, 0.0], (3, 1))
    out = ig.kick(state, dt, trap, forces)
    np.testing.assert_allclose(out.velocities[:, 0], q * e0 * dt / m,
                               rtol=1e-14)
    assert np.all(out.velocities[:, 1:] == 0.0)


def test_kick_adds_laser_velocity_increment(trap):
    state = IonState(np.zeros((2, 3)), np.zeros((2, 3)))
    dv = np.array([[0.1, 0.0, -0.2], [0.0, 0.3, 0.0]])
    out = ig.kick(state, 1e-9, trap, np.zeros((2, 3)), laser_dv=dv)
    np.testing.assert_array_equal(out.velocities, dv)


# ---------------------------------------------------------------------------
# full steps

def test_step_fixed_point_at_origin(trap):
    state = IonState(np.zeros((1, 3)), np.zeros((1, 3)))
    sc = ig.StepConfig(method="direct")
    out = ig.step(state, trap, sc)
    np.testing.assert_array_equal(out.positions, np.zeros((1, 3)))
    np.testing.assert_array_equal(out.velocities, np.zeros((1, 3)))


def test_step_requires_lab_frame(trap):
    state = IonState(np.zeros((1, 3)), np.zeros((1, 3)), frame="rotating")
    with pytest.raises(ValueError, match="lab"):
        ig.step(state, trap, ig.StepConfig())


def test_step_config_validation(trap):
    with pytest.raises(ValueError, match="dt"):
        ig.StepConfig(dt=-1e-9).resolve_dt(trap)
    with pytest.raises(ValueError, match="resolve"):
        ig.StepConfig(dt=1.0 / trap.omega_c).resolve_dt(trap)
    assert ig.StepConfig().resolve_dt(trap) == pytest.approx(
        2.0 * np.pi / trap.omega_c / 40.0)


def test_single_ion_matches_analytic_orbit_second_order():
    cfg = _no_wall_trap()
    x0 = np.array([8e-6, -3e-6, 5e-6])
    v0 = np.array([12.0, 7.0, -9.0])
    t_cyc = 2.0 * np.pi / cfg.omega_c
    errs = []
    for per_cyc in (160, 320, 640):
        n = per_cyc * 10
        sc = ig.StepConfig(dt=t_cyc / per_cyc, method="direct")
        state, _ = ig.run(IonState(x0[None], v0[None]), cfg, sc, n_steps=n)
        ref_pos, ref_vel = _analytic_single_ion(cfg, x0, v0, state.t)
        errs.append(np.linalg.norm(state.positions[0] - ref_pos)
                    / np.linalg.norm(ref_pos))
    # ten cyclotron periods resolved at 640 points each: relative error
    # below 1e-6, converging at second order (ratio 4 per halving)
    assert errs[-1] < 1e-6
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.2)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.2)


def test_angular_momentum_conserved_without_wall(rng):
    cfg = _no_wall_trap()
    n = 10
    pos = rng.normal(size=(n, 3)) * 15e-6
    vel = rng.normal(size=(n, 3)) * 5.0
    q, m, b = cfg.species.charge, cfg.species.mass, cfg.b_field

    def l_z(st):
        x, y = st.positions[:, 0], st.positions[:, 1]
        vx, vy = st.velocities[:, 0], st.velocities[:, 1]
        return float(np.sum(m * (x * vy - y * vx)
                            + 0.5 * q * b * (x**2 + y**2)))

    state = IonState(pos, vel)
    l0 = l_z(state)
    sc = ig.StepConfig(method="direct")
    state, _ = ig.run(state, cfg, sc, n_steps=20000)
    assert abs(l_z(state) - l0) / abs(l0) < 1e-8


def test_energy_envelope_bounded_over_1e5_steps(rng):
    # symplectic signature: bounded oscillation, no secular drift.  A
    # near-equilibrium crystal is the regime where the shadow-energy bound
    # applies; a hot random cloud makes close passes the step cannot resolve.
    cfg = _no_wall_trap()
    pos = _relaxed_crystal(16, cfg, rng)
    state = _thermal_lab_state(pos, cfg, rng, vth=0.2)
    sc = ig.StepConfig(method="direct")
    e0 = energy_report(state, cfg).total
    obs = ig.Observer("e", lambda st, c: energy_report(st, c).total,
                      stride=1000)
    state, series = ig.run(state, cfg, sc, n_steps=100_000, observers=[obs])
    e = np.array(series["e"]["values"])
    assert np.max(np.abs(e - e0)) / abs(e0) < 1e-5


def test_midpoint_wall_phase_beats_endpoint(rng):
    # Endpoint sampling of a rigidly rotating wall equals midpoint sampling
    # of a wall lagged by a constant phase, so the monitored rotating-frame
    # energy picks up a spurious O(dt) term proportional to the crystal's
    # in-plane quadrupole in the wall frame.  Make that term visible: a
    # stronger wall than the canonical trap and a crystal kicked out of
    # alignment so its orientation librates.
    cfg = TrapConfig.from_frequencies(be9(), b_field=4.4588, f_z=1.58e6,
                                      delta=0.05, f_rot=530e3)
    pos = _relaxed_crystal(50, cfg, rng, spread=12e-6)
    th = np.deg2rad(15.0)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    pos[:, :2] = pos[:, :2] @ rot.T
    state0 = _thermal_lab_state(pos, cfg, rng, vth=0.2)
    n_steps = 10_000
    sc = ig.StepConfig(method="direct")
    dt = sc.resolve_dt(cfg)
    q = cfg.species.charge

    def drift_of(energies):
        e = np.asarray(energies)
        return np.max(np.abs(e - e[0])) / abs(e[0])

    # midpoint variant: the production step
    state = state0.copy()
    e_mid = [energy_report(state, cfg).total]
    for _ in range(n_steps):
        state = ig.step(state, cfg, sc)
        e_mid.append(energy_report(state, cfg).total)

    # endpoint variant: identical splitting, wall phase at step start
    state = state0.copy()
    e_end = [energy_report(state, cfg).total]
    for _ in range(n_steps):
        t_start = state.t
        mid = ig.u0_drift(state, 0.5 * dt, cfg)
        forces = external_force(mid.positions, t_start, cfg)
        sysm = coulomb.ChargeSystem(mid.positions, q)
        forces += q * coulomb.direct_solve(sysm).efield
        mid = ig.kick(mid, dt, cfg, forces)
        state = ig.u0_drift(mid, 0.5 * dt, cfg)
        e_end.append(energy_report(state, cfg).total)

    # measured ratio is ~18x; require 2x so the regression is unambiguous
    assert drift_of(e_mid) < 0.5 * drift_of(e_end)


# ---------------------------------------------------------------------------
# run plumbing

def test_run_zero_steps_unchanged(trap, rng):
    pos = rng.normal(size=(4, 3)) * 1e-5
    vel = rng.normal(size=(4, 3))
    state = IonState(pos.copy(), vel.copy())
    out, series = ig.run(state, trap, ig.StepConfig(), n_steps=0)
    np.testing.assert_array_equal(out.positions, pos)
    np.testing.assert_array_equal(out.velocities, vel)
    assert out.t == 0.0
    assert series == {}


def test_run_deterministic_bitwise(trap, rng):
    pos = rng.normal(size=(6, 3)) * 1e-5
    vel = rng.normal(size=(6, 3))
    sc = ig.StepConfig(method="direct", deterministic=True, seed=99)
    a, _ = ig.run(IonState(pos.copy(), vel.copy()), trap, sc, n_steps=50)
    b, _ = ig.run(IonState(pos.copy(), vel.copy()), trap, sc, n_steps=50)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.velocities, b.velocities)


def test_run_observer_strides(trap):
    state = IonState(np.zeros((1, 3)), np.zeros((1, 3)))
    sc = ig.StepConfig(method="direct")
    obs = [ig.Observer("every", lambda st, c: st.t, stride=1),
           ig.Observer("sparse", lambda st, c: st.t, stride=4)]
    _, series = ig.run(state, trap, sc, n_steps=10, observers=obs)
    assert len(series["every"]["values"]) == 11      # initial + 10
    assert len(series["sparse"]["values"]) == 1 + 2  # initial + steps 4, 8
    dt = sc.resolve_dt(trap)
    np.testing.assert_allclose(series["sparse"]["t"],
                               [0.0, 4 * dt, 8 * dt], rtol=1e-12)


def test_run_rejects_duplicate_observer_names(trap):
    state = IonState(np.zeros((1, 3)), np.zeros((1, 3)))
    obs = [ig.Observer("x", lambda st, c: 0), ig.Observer("x", lambda st, c: 1)]
    with pytest.raises(ValueError, match="unique"):
        ig.run(state, trap, ig.StepConfig(), n_steps=1, observers=obs)
