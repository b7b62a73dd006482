"""Thermal-state preparation and temperature/displacement diagnostics.

Preparing a crystal at a target temperature ``T_i`` requires seeding both the
kinetic *and* the potential energy.  For an ordinary set of oscillators one
could start all modes at temperature ``T_i`` by giving the ions kinetic energy
at ``2 T_i`` and no potential energy, but the magnetized crystal breaks that
shortcut: its low-frequency guiding-center (E x B) modes store most of their
energy as potential energy, so a velocity-only start would leave them nearly
unexcited.  The initializer therefore combines

* :func:`sample_velocities` -- rotating-frame speeds drawn from the
  Maxwell-Boltzmann speed distribution with isotropic directions, and
* :func:`metropolis_positions` -- a Metropolis walk over single-ion
  displacements that brings the potential energy to values typical of
  ``T_i``, starting from a converged equilibrium.

:func:`thermal_state` composes the two into a lab-frame state (the rigid
crystal rotation is added on top of the thermal velocities).

Diagnostics operate on :class:`TrajectoryWindow` batches of rotating-frame
snapshots: per-direction kinetic temperatures and the potential-energy
temperature (:func:`temperatures`), per-ion rms displacement
(:func:`rms_displacement`), and the relative position/energy error metrics
used to compare two solver trajectories of the same system
(:func:`position_error`, :func:`energy_error`).  All temperatures are defined
in the rotating frame; using lab-frame velocities would count the rigid
rotation (~km/s at the crystal edge) as heat.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .constants import KB, KE
from .model import (IonState, TrapConfig, confinement_coefficients,
                    from_rotating_frame, rotating_potential_energy,
                    to_rotating_frame)

__all__ = [
    "DEFAULT_WINDOW",
    "DEFAULT_STRIDE",
    "ThermalInitConfig",
    "TemperatureReport",
    "TrajectoryWindow",
    "sample_velocities",
    "metropolis_positions",
    "thermal_state",
    "temperatures",
    "rms_displacement",
    "position_error",
    "energy_error",
]

# Default diagnostic averaging window and sampling stride (integrator steps
# between snapshots).  Plumbing defaults for the CLI; every function here
# works on windows of any size.
DEFAULT_WINDOW = 50e-6   # s
DEFAULT_STRIDE = 10


@dataclass(frozen=True)
class ThermalInitConfig:
    """Thermal-initialization parameters.

    Parameters
    ----------
    temperature : float
        Target temperature T_i of both the kinetic and the potential energy
        sampling, K.
    dx : float
        Maximum single-ion displacement per Metropolis move, m.  Each move
        magnitude is drawn uniformly from (0, dx).
    scans : int
        Number of Metropolis sweeps; one sweep proposes a move for every ion
        once.
    seed : int
        Seed of the random stream used by the position walk; the velocity
        draw in :func:`thermal_state` uses an independent child stream.
    """

    temperature: float
    dx: float = 1e-6
    scans: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")
        if self.dx <= 0.0:
            raise ValueError("dx must be positive")
        if self.scans < 1:
            raise ValueError("scans must be >= 1")


def sample_velocities(n: int, temperature: float, mass: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Draw (n, 3) rotating-frame velocities at `temperature`.

    Speeds follow the Maxwell-Boltzmann speed distribution
    f(v) = 4 pi (m / 2 pi k_B T)^(3/2) v^2 exp(-m v^2 / 2 k_B T); directions
    are isotropic and independent of speed.  The result is a *thermal*
    velocity in the frame co-rotating with the crystal; add the rigid
    rotation (:func:`penningmd.model.from_rotating_frame`) to obtain
    lab-frame velocities.  T = 0 returns zeros.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if temperature < 0.0:
        raise ValueError("temperature must be >= 0")
    if mass <= 0.0:
        raise ValueError("mass must be positive")
    if temperature == 0.0 or n == 0:
        return np.zeros((n, 3))
    scale = np.sqrt(KB * temperature / mass)
    speeds = stats.maxwell.rvs(scale=scale, size=n, random_state=rng)
    directions = stats.uniform_direction(3).rvs(n, random_state=rng)
    return np.asarray(speeds).reshape(n, 1) * directions.reshape(n, 3)


def _pair_energy_change(x: np.ndarray, i: int, xi_new: np.ndarray,
                        kq2: float) -> float:
    """Coulomb energy change when ion i moves to xi_new, J.  O(N)."""
    d_old = x - x[i]
    d_new = x - xi_new
    r_old = np.sqrt(np.einsum("ij,ij->i", d_old, d_old))
    r_new = np.sqrt(np.einsum("ij,ij->i", d_new, d_new))
    r_old[i] = r_new[i] = 1.0   # self term excluded from the sums
    return kq2 * float(np.sum(1.0 / r_new - 1.0 / r_old))


def metropolis_positions(eq_positions: np.ndarray, cfg: TrapConfig,
                         init: ThermalInitConfig,
                         energy_fn: Callable[[np.ndarray], float] | None = None,
                         *, return_trace: bool = False):
    """Sample ion positions at temperature `init.temperature` by Metropolis.

    Starting from a converged equilibrium configuration, runs `init.scans`
    sweeps.  Each sweep visits every ion once and proposes a displacement in
    a uniformly random direction with magnitude uniform in (0, init.dx).  A
    proposal with energy change dE is accepted if dE < 0, or with probability
    exp(-dE / k_B T_i) otherwise; at T_i = 0 only downhill moves are taken.

    With the default energy model (rotating-frame quadratic confinement plus
    Coulomb pairs) each move is evaluated incrementally in O(N) from the
    moved ion's pair sums.  A custom ``energy_fn(positions) -> float`` (J)
    replaces the model entirely and is evaluated on the full configuration
    for every proposal.

    The per-sweep random draws are (directions, magnitudes, acceptance
    uniforms) in that order, so runs are reproducible from `init.seed`.

    Returns the sampled (N, 3) positions; with ``return_trace=True`` returns
    ``(positions, trace)`` where ``trace[k]`` is the potential energy offset
    (J) from the starting configuration after sweep k.
    """
    rng = np.random.default_rng(init.seed)
    x = np.array(eq_positions, dtype=float).reshape(-1, 3)
    n = x.shape[0]
    kbt = KB * init.temperature
    sphere = stats.uniform_direction(3)

    if energy_fn is None:
        m = cfg.species.mass
        coef = 0.5 * m * cfg.omega_z**2 * np.array(confinement_coefficients(cfg))
        kq2 = KE * cfg.species.charge**2
    else:
        energy = float(energy_fn(x))

    offset = 0.0
    trace = np.empty(init.scans) if return_trace else None
    for sweep in range(init.scans):
        directions = sphere.rvs(n, random_state=rng).reshape(n, 3)
        magnitudes = rng.uniform(0.0, init.dx, n)
        uniforms = rng.uniform(0.0, 1.0, n)
        for i in range(n):
            xi_new = x[i] + magnitudes[i] * directions[i]
            if energy_fn is None:
                de = float(coef @ (xi_new**2 - x[i] ** 2))
                if n > 1:
                    de += _pair_energy_change(x, i, xi_new, kq2)
            else:
                x_new = x.copy()
                x_new[i] = xi_new
                e_new = float(energy_fn(x_new))
                de = e_new - energy
            if de < 0.0 or (kbt > 0.0 and uniforms[i] < np.exp(-de / kbt)):
                x[i] = xi_new
                offset += de
                if energy_fn is not None:
                    energy = e_new
        if return_trace:
            trace[sweep] = offset
    if return_trace:
        return x, trace
    return x


def thermal_state(eq_positions: np.ndarray, cfg: TrapConfig,
                  init: ThermalInitConfig,
                  energy_fn: Callable[[np.ndarray], float] | None = None
                  ) -> IonState:
    """Prepare a lab-frame state at temperature `init.temperature`, t = 0.

    Positions come from :func:`metropolis_positions` (potential energy at
    T_i), rotating-frame velocities from :func:`sample_velocities` (kinetic
    energy at T_i, drawn from a child stream of `init.seed` so the two
    samplings are independent), and the rigid crystal rotation is added by
    the rotating-to-lab transform.
    """
    positions = metropolis_positions(eq_positions, cfg, init, energy_fn)
    child = np.random.SeedSequence(init.seed).spawn(1)[0]
    velocities = sample_velocities(positions.shape[0], init.temperature,
                                   cfg.species.mass, np.random.default_rng(child))
    rotating = IonState(positions, velocities, t=0.0, frame="rotating")
    return from_rotating_frame(rotating, cfg)


@dataclass(frozen=True)
class TrajectoryWindow:
    """A batch of rotating-frame snapshots on a common time grid.

    Fields are ``times`` (M,), ``positions`` (M, N, 3) and ``velocities``
    (M, N, 3), all rotating-frame.  Build windows from integrator output
    with :meth:`from_states`, which transforms lab-frame states.
    """

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.atleast_1d(
            np.asarray(self.times, dtype=float)))
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float))
        object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=float))
        if self.times.ndim != 1 or self.times.size == 0:
            raise ValueError("times must be a non-empty 1-D array")
        m = self.times.size
        want = (m, self.positions.shape[1] if self.positions.ndim == 3 else -1, 3)
        if self.positions.shape != want or self.velocities.shape != want:
            raise ValueError(
                f"positions and velocities must both be ({m}, N, 3); got "
                f"{self.positions.shape} and {self.velocities.shape}")

    @classmethod
    def from_states(cls, states: Sequence[IonState],
                    cfg: TrapConfig) -> "TrajectoryWindow":
        """Stack snapshots (any frames) into a rotating-frame window."""
        if len(states) == 0:
            raise ValueError("need at least one snapshot")
        counts = {s.n_ions for s in states}
        if len(counts) != 1:
            raise ValueError(f"snapshots disagree on ion count: {sorted(counts)}")
        rot = [to_rotating_frame(s, cfg) for s in states]
        return cls(times=np.array([s.t for s in rot]),
                   positions=np.stack([s.positions for s in rot]),
                   velocities=np.stack([s.velocities for s in rot]))

    @property
    def n_samples(self) -> int:
        return self.times.size

    @property
    def n_ions(self) -> int:
        return self.positions.shape[1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


@dataclass(frozen=True)
class TemperatureReport:
    """Rotating-frame temperatures averaged over a trajectory window.

    ``t_ax``/``t_perp`` are the axial and planar kinetic temperatures,
    ``t_pe`` the potential-energy temperature relative to ``reference`` (K).
    ``window`` is the averaging duration (s).  ``reference_updated`` is set
    when the window undercut the supplied reference energy and the reference
    was re-minimized from the lowest-energy snapshot.
    """

    t_ax: float
    t_perp: float
    t_pe: float
    window: float
    reference: np.ndarray
    reference_updated: bool = False


def temperatures(window: TrajectoryWindow, cfg: TrapConfig,
                 reference: np.ndarray) -> TemperatureReport:
    """Kinetic and potential-energy temperatures over a window.

    T_ax   = m sum_i <zdot_i^2> / (N k_B)
    T_perp = m sum_i <xdot_i^2 + ydot_i^2> / (2 N k_B)
    T_pe   = (2/3) <E_pot - E_pot(reference)> / (N k_B)

    with time averages over the window, rotating-frame quantities, and E_pot
    the total rotating-frame potential energy (quadratic confinement plus
    Coulomb).  The 2/3 factor assumes three quadratic potential degrees of
    freedom per ion.

    `reference` must be a local potential minimum.  If the window's mean
    energy undercuts it by more than the double-precision energy resolution
    (a laser-cooled crystal can settle into a deeper minimum than the one it
    started from), the reference is re-minimized starting from the
    lowest-energy snapshot and T_pe is recomputed, so a correct report never
    carries a negative temperature; the returned report flags the
    re-minimization and carries the reference actually used.  Energy
    differences below resolution are reported as T_pe = 0.
    """
    ref = np.asarray(reference, dtype=float).reshape(-1, 3)
    n = window.n_ions
    if ref.shape[0] != n:
        raise ValueError(
            f"reference has {ref.shape[0]} ions but the window has {n}")
    m = cfg.species.mass
    v = window.velocities
    t_ax = m * float(np.mean(np.sum(v[:, :, 2] ** 2, axis=1))) / (n * KB)
    t_perp = m * float(np.mean(np.sum(v[:, :, 0] ** 2 + v[:, :, 1] ** 2,
                                      axis=1))) / (2 * n * KB)

    e_ref = rotating_potential_energy(ref, cfg)
    e_t = np.array([rotating_potential_energy(p, cfg) for p in window.positions])
    mean_diff = float(np.mean(e_t)) - e_ref
    resolution = 1e-11 * max(abs(e_ref), float(np.max(np.abs(e_t))), 1e-30)
    updated = False
    if mean_diff < -resolution:
        from .equilibrium import minimize_local
        seed_positions = window.positions[int(np.argmin(e_t))]
        ref = minimize_local(seed_positions, cfg).positions
        e_ref = rotating_potential_energy(ref, cfg)
        mean_diff = float(np.mean(e_t)) - e_ref
        updated = True
    if -resolution <= mean_diff < 0.0:
        mean_diff = 0.0
    t_pe = (2.0 / 3.0) * mean_diff / (n * KB)
    return TemperatureReport(t_ax=t_ax, t_perp=t_perp, t_pe=t_pe,
                             window=window.duration, reference=ref,
                             reference_updated=updated)


def rms_displacement(window: TrajectoryWindow) -> np.ndarray:
    """Per-ion rms displacement about its window-mean position, m.

    sqrt(<|x_i - <x_i>|^2>) in the rotating frame; the length-N result
    measures how far each ion wanders from its lattice site.
    """
    mean = window.positions.mean(axis=0)
    disp = window.positions - mean
    return np.sqrt(np.mean(np.sum(disp**2, axis=-1), axis=0))


def _check_same_grid(a: TrajectoryWindow, b: TrajectoryWindow) -> None:
    if a.positions.shape != b.positions.shape:
        raise ValueError(
            f"trajectory shapes differ: {a.positions.shape} vs {b.positions.shape}")
    if not np.array_equal(a.times, b.times):
        raise ValueError("trajectories are sampled at different times")


def position_error(traj_a: TrajectoryWindow,
                   traj_b: TrajectoryWindow) -> np.ndarray:
    """Relative ion-position error of trajectory a against reference b.

    Per sample time: sqrt(sum_i |r_a,i - r_b,i|^2 / sum_i |r_b,i|^2).  Used
    to quantify how two solver trajectories of the same initial condition
    (e.g. multipole-accelerated vs direct-sum Coulomb) diverge; the norm is
    frame-independent.
    """
    _check_same_grid(traj_a, traj_b)
    num = np.sum((traj_a.positions - traj_b.positions) ** 2, axis=(1, 2))
    den = np.sum(traj_b.positions**2, axis=(1, 2))
    if np.any(den == 0.0):
        raise ValueError("reference trajectory has zero spatial extent at "
                         "some sample time")
    return np.sqrt(num / den)


def energy_error(e_a: np.ndarray, e_b: np.ndarray) -> np.ndarray:
    """Relative total-energy error |E_a - E_b| / |E_b| per sample time.

    Both series should be rotating-frame total energies on the same time
    grid; the rotating-frame total is the conserved quantity, so this stays
    small for a faithful solver even after the microstates decorrelate.
    """
    e_a = np.atleast_1d(np.asarray(e_a, dtype=float))
    e_b = np.atleast_1d(np.asarray(e_b, dtype=float))
    if e_a.shape != e_b.shape:
        raise ValueError(f"energy series shapes differ: {e_a.shape} vs {e_b.shape}")
    if np.any(e_b == 0.0):
        raise ValueError("reference energy is zero at some sample time")
    return np.abs(e_a - e_b) / np.abs(e_b)
