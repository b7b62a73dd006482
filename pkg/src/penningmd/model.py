"""Penning-trap model: species/trap parameters, lab-frame fields, rotating frame.

Conventions (fixed once, used by every module):

* The magnetic field is ``B = +B z_hat`` and charges are positive, so cyclotron
  gyration and the crystal's bulk E x B rotation are both clockwise seen from
  +z; the crystal angular velocity is ``-omega_r z_hat`` with ``omega_r > 0``.
* The static trap potential is ``phi_trap = (k_z/4)(2 z^2 - x^2 - y^2)`` and the
  rotating-wall potential is
  ``phi_wall = (k_z delta / 4) (x^2 + y^2) cos[2(phi_az + omega_r t)]``,
  a quadrupole pattern co-rotating with the crystal.
* Lab -> rotating-frame coordinates: ``x_r = R(+omega_r t) x`` where ``R`` is a
  counterclockwise planar rotation of the coordinates; a point rigidly rotating
  with the crystal is static in this frame.  In the rotating frame the wall is
  the static term ``+ (q k_z delta / 4)(x_r^2 - y_r^2)``, so the per-ion
  quadratic energy is ``(m omega_z^2 / 2)(C_x x_r^2 + C_y y_r^2 + C_z z^2)``
  with ``C_x = beta + delta/2``, ``C_y = beta - delta/2``, ``C_z = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .constants import KE, LINEWIDTH_BE9, M_BE9, QE, WAVELENGTH_BE9


@dataclass(frozen=True)
class IonSpecies:
    """Ion species: mass/charge plus the cooling-transition constants."""

    mass: float                     # kg
    charge: float = QE              # C
    wavelength: float = WAVELENGTH_BE9   # cooling transition wavelength, m
    linewidth: float = LINEWIDTH_BE9     # natural linewidth gamma0, rad/s

    @property
    def k_photon(self) -> float:
        """Photon wavenumber 2*pi/lambda of the cooling transition, 1/m."""
        return 2.0 * np.pi / self.wavelength


def be9() -> IonSpecies:
    return IonSpecies(mass=M_BE9)


@dataclass(frozen=True)
class TrapConfig:
    """Trap operating point: field, axial curvature, wall strength, rotation.

    Parameters
    ----------
    species : IonSpecies
    b_field : float
        Axial magnetic field B, tesla (B > 0, along +z).
    k_z : float
        Trap electrostatic curvature, V/m^2; omega_z = sqrt(q k_z / m).
    delta : float
        Dimensionless rotating-wall strength (>= 0).
    omega_r : float
        Magnitude of the crystal/wall rotation frequency, rad/s, with
        0 < omega_r < omega_c.  The rotation sense is clockwise (-z).
    """

    species: IonSpecies
    b_field: float
    k_z: float
    delta: float
    omega_r: float

    def __post_init__(self):
        if self.b_field <= 0.0:
            raise ValueError("b_field must be positive")
        if self.k_z <= 0.0:
            raise ValueError("k_z must be positive")
        if self.delta < 0.0:
            raise ValueError("delta must be non-negative")
        if not 0.0 < self.omega_r < self.omega_c:
            raise ValueError("omega_r must lie in (0, omega_c)")

    @property
    def omega_c(self) -> float:
        """Bare cyclotron frequency qB/m, rad/s."""
        return self.species.charge * self.b_field / self.species.mass

    @property
    def omega_z(self) -> float:
        """Axial frequency sqrt(q k_z / m), rad/s."""
        return np.sqrt(self.species.charge * self.k_z / self.species.mass)

    @classmethod
    def from_frequencies(cls, species: IonSpecies, b_field: float, f_z: float,
                         delta: float, f_rot: float) -> "TrapConfig":
        """Build from axial and rotation frequencies in Hz instead of k_z, omega_r."""
        omega_z = 2.0 * np.pi * f_z
        k_z = species.mass * omega_z**2 / species.charge
        return cls(species=species, b_field=b_field, k_z=k_z, delta=delta,
                   omega_r=2.0 * np.pi * f_rot)


def beta(cfg: TrapConfig) -> float:
    """Dimensionless planar confinement at the working point:
    beta = omega_r (omega_c - omega_r) / omega_z^2 - 1/2."""
    return cfg.omega_r * (cfg.omega_c - cfg.omega_r) / cfg.omega_z**2 - 0.5


def confinement_coefficients(cfg: TrapConfig) -> tuple[float, float, float]:
    """Rotating-frame quadratic coefficients (C_x, C_y, C_z)."""
    b = beta(cfg)
    return b + 0.5 * cfg.delta, b - 0.5 * cfg.delta, 1.0


@dataclass
class IonState:
    """Positions/velocities of N identical ions at time t, in `frame`."""

    positions: np.ndarray           # (N, 3), m
    velocities: np.ndarray          # (N, 3), m/s
    t: float = 0.0                  # s
    frame: str = "lab"              # "lab" | "rotating"

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        if self.positions.shape != self.velocities.shape or self.positions.shape[1] != 3:
            raise ValueError("positions and velocities must both be (N, 3)")
        if self.frame not in ("lab", "rotating"):
            raise ValueError("frame must be 'lab' or 'rotating'")

    @property
    def n_ions(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "IonState":
        return IonState(self.positions.copy(), self.velocities.copy(), self.t, self.frame)


def trap_potential(positions: np.ndarray, cfg: TrapConfig) -> np.ndarray:
    """Static lab-frame trap potential phi_trap at each position, V."""
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    return 0.25 * cfg.k_z * (2.0 * z**2 - x**2 - y**2)


def wall_potential(positions: np.ndarray, t: float, cfg: TrapConfig) -> np.ndarray:
    """Rotating-wall lab-frame potential at time t, V.

    (x^2+y^2) cos[2(phi + w_r t)] written out in Cartesian components.
    """
    x, y = positions[:, 0], positions[:, 1]
    c = np.cos(2.0 * cfg.omega_r * t)
    s = np.sin(2.0 * cfg.omega_r * t)
    return 0.25 * cfg.k_z * cfg.delta * ((x**2 - y**2) * c - 2.0 * x * y * s)


def external_force(positions: np.ndarray, t: float, cfg: TrapConfig) -> np.ndarray:
    """Lab-frame electrostatic force -q grad(phi_trap + phi_wall), N.

    The magnetic force is not included; the integrator treats it exactly in
    its drift map.
    """
    positions = np.atleast_2d(positions)
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    q = cfg.species.charge
    f = np.empty_like(positions)
    f[:, 0] = 0.5 * q * cfg.k_z * x
    f[:, 1] = 0.5 * q * cfg.k_z * y
    f[:, 2] = -q * cfg.k_z * z
    if cfg.delta != 0.0:
        c = np.cos(2.0 * cfg.omega_r * t)
        s = np.sin(2.0 * cfg.omega_r * t)
        half_qkd = 0.5 * q * cfg.k_z * cfg.delta
        f[:, 0] -= half_qkd * (x * c - y * s)
        f[:, 1] -= half_qkd * (-y * c - x * s)
    return f


def _rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_rotating_frame(state: IonState, cfg: TrapConfig) -> IonState:
    """Transform a lab-frame state to the frame co-rotating with the crystal.

    x_r = R(+omega_r t) x; v_r = R(+omega_r t) (v + omega_r z_hat x x).
    An ion rigidly rotating with the (clockwise) crystal maps to zero velocity.
    """
    if state.frame == "rotating":
        return state.copy()
    theta = cfg.omega_r * state.t
    rot = _rot2(theta)
    pos = state.positions.copy()
    vel = state.velocities.copy()
    # v + omega_r (z_hat x x) = v + omega_r (-y, x, 0)
    vel[:, 0] -= cfg.omega_r * state.positions[:, 1]
    vel[:, 1] += cfg.omega_r * state.positions[:, 0]
    pos[:, :2] = pos[:, :2] @ rot.T
    vel[:, :2] = vel[:, :2] @ rot.T
    return IonState(pos, vel, state.t, frame="rotating")


def from_rotating_frame(state: IonState, cfg: TrapConfig) -> IonState:
    """Inverse of :func:`to_rotating_frame`."""
    if state.frame == "lab":
        return state.copy()
    theta = cfg.omega_r * state.t
    rot = _rot2(-theta)
    pos = state.positions.copy()
    vel = state.velocities.copy()
    pos[:, :2] = pos[:, :2] @ rot.T
    vel[:, :2] = vel[:, :2] @ rot.T
    vel[:, 0] += cfg.omega_r * pos[:, 1]
    vel[:, 1] -= cfg.omega_r * pos[:, 0]
    return IonState(pos, vel, state.t, frame="lab")


def coulomb_potential_energy(positions: np.ndarray, cfg: TrapConfig,
                             phi: np.ndarray | None = None) -> float:
    """Total Coulomb energy (1/2) sum_i q phi_i, J.

    `phi` may be passed in (per-ion potential from the field solver) to avoid
    recomputation; otherwise it is computed with the auto-selected solver.
    """
    if phi is None:
        from . import coulomb
        system = coulomb.ChargeSystem(positions, cfg.species.charge)
        phi = coulomb.solve(system).phi
    return 0.5 * cfg.species.charge * float(np.sum(phi))


def rotating_potential_energy(positions: np.ndarray, cfg: TrapConfig,
                              phi: np.ndarray | None = None) -> float:
    """Total rotating-frame potential energy of a configuration, J.

    sum_i (m omega_z^2 / 2)(C_x x^2 + C_y y^2 + C_z z^2) + Coulomb energy,
    with positions given in the rotating frame.  Raises if the working point
    does not confine (min(C_x, C_y) <= 0).
    """
    positions = np.atleast_2d(positions)
    cx, cy, cz = confinement_coefficients(cfg)
    if min(cx, cy) <= 0.0:
        raise ValueError(
            f"no planar confinement at this working point: C_x={cx:.3g}, C_y={cy:.3g}")
    m = cfg.species.mass
    wz2 = cfg.omega_z**2
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    e_trap = 0.5 * m * wz2 * float(np.sum(cx * x**2 + cy * y**2 + cz * z**2))
    return e_trap + coulomb_potential_energy(positions, cfg, phi)


@dataclass(frozen=True)
class EnergyReport:
    """Rotating-frame energy decomposition of a state (J)."""

    kinetic: float
    trap: float          # quadratic trap + wall terms
    coulomb: float
    frame: str = "rotating"

    @property
    def total(self) -> float:
        return self.kinetic + self.trap + self.coulomb


def energy_report(state: IonState, cfg: TrapConfig,
                  phi: np.ndarray | None = None) -> EnergyReport:
    """Kinetic/trap/Coulomb decomposition in the rotating frame.

    The rotating-frame total is the conserved quantity of the wall-driven
    dynamics (the Jacobi constant); lab-frame states are transformed first.
    """
    rot = to_rotating_frame(state, cfg)
    m = cfg.species.mass
    kinetic = 0.5 * m * float(np.sum(rot.velocities**2))
    cx, cy, cz = confinement_coefficients(cfg)
    wz2 = cfg.omega_z**2
    x, y, z = rot.positions[:, 0], rot.positions[:, 1], rot.positions[:, 2]
    trap = 0.5 * m * wz2 * float(np.sum(cx * x**2 + cy * y**2 + cz * z**2))
    coul = coulomb_potential_energy(rot.positions, cfg, phi)
    return EnergyReport(kinetic=kinetic, trap=trap, coulomb=coul)
