"""Normal-mode analysis of ion crystals linearized about equilibrium.

The rotating-frame dynamics near an equilibrium {x_i^0} are governed by
the stiffness matrix K (the Hessian of the rotating-frame potential) and
the Lorentz coupling from the effective magnetic field
B_eff = B - 2 m omega_r / q.  Collecting displacements and velocities
into a 6N state vector q = (dx_1..dx_N, dy_1.., dz_1.., vx_1.., vy_1..,
vz_1..) the linearized equations read dq/dt = D q with

    D = [[0, I], [-K/m, L]],    L vx = +(q B_eff/m) vy,
                                L vy = -(q B_eff/m) vx,

i.e. the velocity-velocity block is the antisymmetric Lorentz coupling
(clockwise gyration for positive B_eff, matching the sign conventions of
the nonlinear integrator, which serves as ground truth for this module).
Eigenvectors obey D u_n = -i omega_n u_n; the 3N positive-frequency
modes are returned with their energy-partition ratio R_n (time-averaged
potential over kinetic energy), axial fraction f_n^z, and a branch label
from a three-way split of the log-frequency spectrum.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eig as _dense_eig

from .constants import KE
from .model import TrapConfig, confinement_coefficients

__all__ = [
    "ModeSpectrum",
    "StiffnessMatrix",
    "UnstableEquilibriumError",
    "axial_fraction",
    "classify_branches",
    "crystal_modes",
    "dynamical_matrix",
    "effective_field",
    "eigenmodes",
    "mode_energy_ratio",
    "position_part",
    "stiffness_matrix",
    "velocity_part",
]

_AXES = {"x": 0, "y": 1, "z": 2}
_BRANCH_NAMES = ("ExB", "axial", "cyclotron")


class UnstableEquilibriumError(RuntimeError):
    """Raised when the linearization has exponentially growing modes.

    Carries ``growth_rates`` (1/s) and ``vectors`` of the offending modes.
    """

    def __init__(self, growth_rates, vectors):
        self.growth_rates = growth_rates
        self.vectors = vectors
        super().__init__(
            f"unstable equilibrium: {len(growth_rates)} eigenvalues with "
            f"positive real part up to {np.max(growth_rates):.3e} 1/s")


def effective_field(cfg: TrapConfig) -> float:
    """Magnetic field felt in the rotating frame: B - 2 m omega_r / q (T)."""
    m, q = cfg.species.mass, cfg.species.charge
    return cfg.b_field - 2.0 * m * cfg.omega_r / q


@dataclass(frozen=True)
class StiffnessMatrix:
    """Hessian of the rotating-frame potential, coordinate-grouped.

    ``matrix`` is the symmetric 3N x 3N array ordered (x_1..x_N, y_1..y_N,
    z_1..z_N); ``block(a, b)`` views the N x N block for axes a, b.
    """

    matrix: np.ndarray
    n_ions: int
    mass: float

    def block(self, alpha: str, beta: str) -> np.ndarray:
        n = self.n_ions
        i, j = _AXES[alpha], _AXES[beta]
        return self.matrix[i * n:(i + 1) * n, j * n:(j + 1) * n]


def stiffness_matrix(eq_positions: np.ndarray, cfg: TrapConfig) -> StiffnessMatrix:
    """Assemble K about an equilibrium configuration (entries J/m^2)."""
    pos = np.atleast_2d(np.asarray(eq_positions, dtype=float))
    n = pos.shape[0]
    m, q = cfg.species.mass, cfg.species.charge
    kq2 = KE * q * q

    diff = pos[:, None, :] - pos[None, :, :]          # (N, N, 3) signed
    r2 = np.sum(diff * diff, axis=-1)
    if n > 1 and not np.all(r2[~np.eye(n, dtype=bool)] > 0.0):
        raise ValueError("coincident ions have no finite stiffness")
    np.fill_diagonal(r2, 1.0)  # placeholder; the diagonal is rebuilt below
    inv_r5 = r2 ** -2.5
    np.fill_diagonal(inv_r5, 0.0)

    coeffs = confinement_coefficients(cfg)
    k = np.empty((3 * n, 3 * n))
    for a in range(3):
        for b in range(a, 3):
            delta_ab = 1.0 if a == b else 0.0
            off = kq2 * (delta_ab * r2 - 3.0 * diff[..., a] * diff[..., b]) \
                * inv_r5
            block = off.copy()
            np.fill_diagonal(block, 0.0)
            # translation invariance of the pair potential: the diagonal
            # Coulomb term is minus the row sum of the off-diagonal one
            block[np.arange(n), np.arange(n)] = -block.sum(axis=1)
            if a == b:
                block[np.arange(n), np.arange(n)] += \
                    m * cfg.omega_z ** 2 * coeffs[a]
            k[a * n:(a + 1) * n, b * n:(b + 1) * n] = block
            if a != b:
                k[b * n:(b + 1) * n, a * n:(a + 1) * n] = block.T
    return StiffnessMatrix(k, n, m)


def dynamical_matrix(k: StiffnessMatrix, cfg: TrapConfig) -> np.ndarray:
    """6N x 6N real matrix D generating dq/dt = D q near equilibrium."""
    n = k.n_ions
    m, q = cfg.species.mass, cfg.species.charge
    omega_b = q * effective_field(cfg) / m
    d = np.zeros((6 * n, 6 * n))
    d[:3 * n, 3 * n:] = np.eye(3 * n)
    d[3 * n:, :3 * n] = -k.matrix / m
    idx = np.arange(n)
    d[3 * n + idx, 4 * n + idx] = omega_b       # dvx/dt += omega_b * vy
    d[4 * n + idx, 3 * n + idx] = -omega_b      # dvy/dt -= omega_b * vx
    return d


@dataclass(frozen=True)
class ModeSpectrum:
    """Positive-frequency normal modes, sorted by ascending frequency.

    ``vectors[n]`` is the 6N complex eigenvector (coordinate-grouped
    positions then velocities) normalized so its velocity part has unit
    norm; the physical trajectory of mode n is Re(u_n exp(-i omega_n t)).
    Exact zero modes (continuous symmetries) are reported separately and
    excluded from diagnostics.  ``ratios``, ``axial_fractions`` and
    ``branches`` are filled by the diagnostic passes; within a degenerate
    frequency subspace only their subspace averages are unique.
    """

    frequencies: np.ndarray
    vectors: np.ndarray
    n_ions: int
    zero_modes: np.ndarray
    ratios: np.ndarray | None = None
    axial_fractions: np.ndarray | None = None
    branches: np.ndarray | None = None
    branch_resolved: bool | None = None

    @property
    def n_modes(self) -> int:
        return len(self.frequencies)


def position_part(u: np.ndarray) -> np.ndarray:
    """(N, 3) complex displacement pattern of a 6N eigenvector."""
    n = len(u) // 6
    return np.stack([u[0:n], u[n:2 * n], u[2 * n:3 * n]], axis=1)


def velocity_part(u: np.ndarray) -> np.ndarray:
    """(N, 3) complex velocity pattern of a 6N eigenvector."""
    n = len(u) // 6
    return np.stack([u[3 * n:4 * n], u[4 * n:5 * n], u[5 * n:6 * n]], axis=1)


def eigenmodes(d: np.ndarray, *, residual_tol: float = 1e-8,
               zero_tol: float = 1e-8,
               stability_tol: float = 1e-7) -> ModeSpectrum:
    """Diagonalize D and return the positive-frequency mode spectrum.

    Eigenvalues with |lambda| <= zero_tol * max|lambda| are treated as
    exact zero modes (continuous symmetries); a real part exceeding
    stability_tol * max|lambda| raises UnstableEquilibriumError.  Each
    kept eigenpair satisfies ||D u + i omega u|| <= residual_tol ||u||
    in the nondimensionalized frame.
    """
    d = np.asarray(d, dtype=float)
    n6 = d.shape[0]
    if d.shape != (n6, n6) or n6 % 6:
        raise ValueError("dynamical matrix must be square with 6N rows")
    n = n6 // 6
    kb = d[3 * n:, :3 * n]
    wb = d[3 * n:, 3 * n:]
    # rescale velocities by a frequency so eigensolving is well conditioned
    scale = max(np.sqrt(np.abs(kb).max()), np.abs(wb).max(), 1e-300)
    dnd = np.block([[np.zeros((3 * n, 3 * n)), np.eye(3 * n)],
                    [kb / scale ** 2, wb / scale]])
    lam, vec = _dense_eig(dnd)

    lam_scale = np.abs(lam).max()
    growing = lam.real > stability_tol * lam_scale
    if np.any(growing):
        raise UnstableEquilibriumError(lam.real[growing] * scale,
                                       vec[:, growing])
    zero = np.abs(lam) <= zero_tol * lam_scale
    positive = (~zero) & (lam.imag < 0.0)

    omega = -lam.imag[positive] * scale
    vectors = vec[:, positive].T
    order = np.argsort(omega)
    omega, vectors = omega[order], vectors[order]

    residual = np.abs(dnd @ vec[:, positive] - lam[positive] * vec[:, positive])
    worst = np.max(np.linalg.norm(residual, axis=0)
                   / np.linalg.norm(vec[:, positive], axis=0))
    if worst > residual_tol:
        raise RuntimeError(
            f"eigenpair residual {worst:.3e} exceeds {residual_tol:.1e}")

    expected = 3 * n - int(np.count_nonzero(zero)) // 2
    if len(omega) != expected:
        raise RuntimeError(
            f"expected {expected} positive-frequency modes, got {len(omega)}")

    # undo the velocity rescaling, then normalize ||u^v|| = 1
    phys = np.concatenate([vectors[:, :3 * n],
                           vectors[:, 3 * n:] * scale], axis=1)
    vnorm = np.linalg.norm(phys[:, 3 * n:], axis=1, keepdims=True)
    phys = phys / np.where(vnorm == 0.0, 1.0, vnorm)
    zeros_phys = np.concatenate([vec[:, zero].T[:, :3 * n],
                                 vec[:, zero].T[:, 3 * n:] * scale], axis=1)
    return ModeSpectrum(omega, phys, n, zeros_phys)


def mode_energy_ratio(u: np.ndarray, k: StiffnessMatrix) -> float:
    """Time-averaged potential over kinetic energy of one mode.

    R_n = (u^r+ K u^r) / (m u^v+ u^v); scale-invariant in u.
    """
    n3 = 3 * k.n_ions
    r, v = u[:n3], u[n3:]
    kin = float(np.real(np.vdot(v, v)))
    if kin == 0.0:
        raise ValueError("mode has zero velocity part")
    return float(np.real(np.vdot(r, k.matrix @ r))) / (k.mass * kin)


def axial_fraction(u: np.ndarray) -> float:
    """Fraction of a mode's displacement pattern along z: in [0, 1]."""
    n = len(u) // 6
    r = u[:3 * n]
    total = float(np.real(np.vdot(r, r)))
    if total == 0.0:
        raise ValueError("mode has zero position part")
    axial = float(np.real(np.vdot(r[2 * n:], r[2 * n:])))
    return axial / total


def _split_log_frequencies(freqs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Three-way 1D k-means on log-frequencies.

    Returns integer labels (0 lowest branch) and whether the branches are
    resolved: each boundary gap must be the locally dominant spacing,
    i.e. larger than every adjacent log-spacing within six modes on
    either side.  When branches overlap, the split lands inside a dense
    region and some flanking spacing exceeds the gap.
    """
    logs = np.log(np.sort(freqs))
    centers = np.quantile(logs, [1 / 6, 1 / 2, 5 / 6])
    labels = np.zeros(len(logs), dtype=int)
    for _ in range(200):
        bounds = (centers[:-1] + centers[1:]) / 2
        labels = np.searchsorted(bounds, logs)
        new = np.array([logs[labels == j].mean() if np.any(labels == j)
                        else centers[j] for j in range(3)])
        if np.allclose(new, centers, rtol=0.0, atol=1e-15):
            break
        centers = new
    resolved = True
    for j in (0, 1):
        lower, upper = logs[labels == j], logs[labels == j + 1]
        if len(lower) == 0 or len(upper) == 0:
            resolved = False
            continue
        gap = upper[0] - lower[-1]
        flank = np.concatenate([np.diff(lower[-7:]), np.diff(upper[:7])])
        if len(flank) and gap <= flank.max():
            resolved = False
    return labels, resolved


def classify_branches(spectrum: ModeSpectrum) -> ModeSpectrum:
    """Label each mode ExB / axial / cyclotron by log-frequency grouping.

    Sets ``branch_resolved`` False when the inter-branch gaps are not
    cleanly larger than intra-branch spacings (overlapping branches).
    """
    labels, resolved = _split_log_frequencies(spectrum.frequencies)
    names = np.array([_BRANCH_NAMES[j] for j in labels])
    return dataclasses.replace(spectrum, branches=names,
                               branch_resolved=resolved)


def crystal_modes(eq_positions: np.ndarray, cfg: TrapConfig, *,
                  residual_tol: float = 1e-8, zero_tol: float = 1e-8,
                  stability_tol: float = 1e-7) -> ModeSpectrum:
    """Full pipeline: stiffness, dynamical matrix, modes, diagnostics."""
    k = stiffness_matrix(eq_positions, cfg)
    spectrum = eigenmodes(dynamical_matrix(k, cfg),
                          residual_tol=residual_tol, zero_tol=zero_tol,
                          stability_tol=stability_tol)
    ratios = np.array([mode_energy_ratio(u, k) for u in spectrum.vectors])
    axial = np.array([axial_fraction(u) for u in spectrum.vectors])
    spectrum = dataclasses.replace(spectrum, ratios=ratios,
                                   axial_fractions=axial)
    return classify_branches(spectrum)
