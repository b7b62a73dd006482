"""Minimum-energy crystal configurations and analytic ellipsoid shapes.

Equilibria are local minima of the rotating-frame potential energy, found
by limited-memory quasi-Newton descent with the analytic gradient (trap
force plus the Coulomb field from the solver stack).  The problem is
nondimensionalized by the natural Coulomb length ell = (ke q^2 / m wz^2)^(1/3)
so the optimizer's absolute tolerances are meaningful.

The gross crystal shape follows cold-fluid theory: a uniform-density
ellipsoid whose interior space charge exactly cancels the quadratic trap
curvature.  Writing the interior potential coefficients of a unit-density
ellipsoid as A_i (with sum A_i = 2), force balance per axis reads

    omega_r (omega_c - omega_r) * A_i(a2/a1, a3/a1) = omega_z^2 * C_i,

where C_i are the confinement coefficients sorted ascending and the
semi-axes are sorted descending: the LARGEST axis lies along the SMALLEST
coefficient.  Summing the three equations reproduces the cold-fluid
density n0 = 2 eps0 m omega_r (omega_c - omega_r) / q^2 identically, so
two equations determine the two ratios and the third is redundant.  The
A_i are evaluated with the Carlson symmetric integral R_D, which is
smooth through the spherical and spheroidal degeneracies where the
equivalent incomplete-elliptic-integral expressions turn 0/0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import special as _sp
from scipy.optimize import minimize as _minimize

from . import coulomb
from .constants import EPS0
from .model import TrapConfig, confinement_coefficients, rotating_potential_energy

__all__ = [
    "EllipsoidShape",
    "MinimizeReport",
    "axis_order",
    "cold_fluid_density",
    "ellipsoid_ratios",
    "elliptic_E",
    "elliptic_F",
    "find_equilibrium",
    "fit_ellipsoid_scale",
    "minimize_local",
    "predicted_shape",
    "wigner_seitz_radius",
]


# ---------------------------------------------------------------------------
# cold-fluid scales

def cold_fluid_density(cfg: TrapConfig) -> float:
    """Uniform ion density (1/m^3) that cancels the trap curvature."""
    m, q = cfg.species.mass, cfg.species.charge
    return 2.0 * EPS0 * m * cfg.omega_r * (cfg.omega_c - cfg.omega_r) / (q * q)


def wigner_seitz_radius(cfg: TrapConfig) -> float:
    """Radius a_ws with (4 pi / 3) a_ws^3 = 1 / n0, the per-ion volume."""
    return float((3.0 / (4.0 * np.pi * cold_fluid_density(cfg))) ** (1.0 / 3.0))


def _coulomb_length(cfg: TrapConfig) -> float:
    """Length where the pair repulsion matches the axial trap force."""
    m, q = cfg.species.mass, cfg.species.charge
    from .constants import KE
    return float((KE * q * q / (m * cfg.omega_z ** 2)) ** (1.0 / 3.0))


# ---------------------------------------------------------------------------
# ellipsoid shape theory

def elliptic_F(theta: float, k: float) -> float:
    """Incomplete elliptic integral of the first kind, modulus convention."""
    _check_elliptic_domain(theta, k)
    if k == 1.0 and np.isclose(np.sin(theta), 1.0):
        raise ValueError("elliptic_F diverges at k sin(theta) = 1")
    return float(_sp.ellipkinc(theta, k * k))


def elliptic_E(theta: float, k: float) -> float:
    """Incomplete elliptic integral of the second kind, modulus convention."""
    _check_elliptic_domain(theta, k)
    return float(_sp.ellipeinc(theta, k * k))


def _check_elliptic_domain(theta: float, k: float) -> None:
    if not 0.0 <= theta <= np.pi / 2.0 + 1e-12:
        raise ValueError("theta must lie in [0, pi/2]")
    if not 0.0 <= k <= 1.0:
        raise ValueError("modulus k must lie in [0, 1]")


def _interior_coefficients(r2, r3):
    """Potential coefficients (A1, A2, A3) of a uniform ellipsoid.

    Arguments are the axis ratios a2/a1 and a3/a1; the identity
    A1 + A2 + A3 = 2 holds for any positive ratios.
    """
    f = (2.0 / 3.0) * r2 * r3
    a1 = f * _sp.elliprd(r2 * r2, r3 * r3, 1.0)
    a2 = f * _sp.elliprd(1.0, r3 * r3, r2 * r2)
    a3 = f * _sp.elliprd(1.0, r2 * r2, r3 * r3)
    return a1, a2, a3


def _shape_targets(cfg: TrapConfig) -> np.ndarray:
    """Sorted-ascending right-hand sides omega_z^2 C_i / [w_r (w_c - w_r)]."""
    coeffs = np.sort(confinement_coefficients(cfg))
    if coeffs[0] <= 0.0:
        raise ValueError(
            "no confined ellipsoid at this working point: "
            f"smallest confinement coefficient {coeffs[0]:.3g} <= 0")
    w = cfg.omega_r * (cfg.omega_c - cfg.omega_r)
    if w <= 0.0:
        raise ValueError("rotation frequency must lie in (0, omega_c)")
    return cfg.omega_z ** 2 * coeffs / w


def ellipsoid_ratios(cfg: TrapConfig) -> tuple[float, float]:
    """Axis ratios (a2/a1, a3/a1) of the cold-fluid equilibrium ellipsoid."""
    t1, t2, t3 = _shape_targets(cfg)
    if t3 - t1 <= 1e-12 * t3:
        return 1.0, 1.0  # isotropic confinement: sphere

    def residual(u):
        r2, r3 = np.exp(u)
        a1, a2, _ = _interior_coefficients(r2, r3)
        return np.array([a1 - t1, a2 - t2])

    # coarse seed on a grid (R_D vectorizes), then damped Newton on logs
    g2, g3 = np.meshgrid(np.linspace(0.03, 1.0, 70),
                         np.linspace(0.03, 1.0, 70), indexing="ij")
    mask = g3 <= g2
    a1g, a2g, _ = _interior_coefficients(g2[mask], g3[mask])
    best = np.argmin((a1g - t1) ** 2 + (a2g - t2) ** 2)
    u = np.log([g2[mask][best], g3[mask][best]])

    res = residual(u)
    for _ in range(200):
        if np.max(np.abs(res)) <= 1e-13 * t3:
            break
        jac = np.empty((2, 2))
        for j in range(2):
            du = np.zeros(2)
            du[j] = 1e-7
            jac[:, j] = (residual(u + du) - res) / 1e-7
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            raise RuntimeError("ellipsoid shape equations: singular Jacobian")
        norm0 = np.linalg.norm(res)
        alpha = 1.0
        for _ in range(60):
            trial = u + alpha * step
            trial_res = residual(trial)
            if np.linalg.norm(trial_res) < norm0:
                u, res = trial, trial_res
                break
            alpha *= 0.5
        else:
            break
    if np.max(np.abs(res)) > 1e-12 * t3:
        raise RuntimeError("ellipsoid shape equations did not converge")
    r2, r3 = np.exp(u)
    return float(min(r2, 1.0)), float(min(r3, 1.0))


def axis_order(cfg: TrapConfig) -> tuple[int, int, int]:
    """Coordinate axes (0=x, 1=y, 2=z) carrying a1 >= a2 >= a3.

    The largest semi-axis lies along the smallest confinement coefficient.
    """
    order = np.argsort(confinement_coefficients(cfg), kind="stable")
    return int(order[0]), int(order[1]), int(order[2])


@dataclass(frozen=True)
class EllipsoidShape:
    """Semi-axes a1 >= a2 >= a3 (m) and their coordinate-axis assignment."""

    a1: float
    a2: float
    a3: float
    axes: tuple[int, int, int]  # coordinate axis (0=x,1=y,2=z) of a1, a2, a3

    def __post_init__(self):
        if not (self.a1 >= self.a2 >= self.a3 > 0.0):
            raise ValueError("semi-axes must be positive and sorted a1>=a2>=a3")
        if sorted(self.axes) != [0, 1, 2]:
            raise ValueError("axes must be a permutation of (0, 1, 2)")

    @property
    def semi_axes_xyz(self) -> np.ndarray:
        """Semi-axes in coordinate order (a_x, a_y, a_z)."""
        out = np.empty(3)
        out[list(self.axes)] = (self.a1, self.a2, self.a3)
        return out

    @property
    def modulus_sq(self) -> float:
        """Elliptic modulus k^2 = (a1^2 - a2^2) / (a1^2 - a3^2); 0 if a1 = a3."""
        denom = self.a1 ** 2 - self.a3 ** 2
        if denom == 0.0:
            return 0.0
        return (self.a1 ** 2 - self.a2 ** 2) / denom

    @property
    def amplitude(self) -> float:
        """Elliptic amplitude theta = arccos(a3 / a1), radians."""
        return float(np.arccos(min(self.a3 / self.a1, 1.0)))


def predicted_shape(cfg: TrapConfig, n: int) -> EllipsoidShape:
    """Cold-fluid ellipsoid for n ions: analytic ratios, density-set size."""
    r2, r3 = ellipsoid_ratios(cfg)
    volume = n / cold_fluid_density(cfg)
    a1 = (3.0 * volume / (4.0 * np.pi * r2 * r3)) ** (1.0 / 3.0)
    return EllipsoidShape(a1, a1 * r2, a1 * r3, axis_order(cfg))


def fit_ellipsoid_scale(positions: np.ndarray, ratios: tuple[float, float],
                        cfg: TrapConfig) -> EllipsoidShape:
    """Scale the unit ellipsoid of the given ratios to the outermost shell.

    The normalized radius of every ion is computed on the unit-a1
    ellipsoid; the returned a1 is the least-squares (mean) radius over
    the outer shell, taken as the largest one percent of ions (at least
    four), so the fitted surface passes through the outer shell rather
    than the single outermost ion.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n = pos.shape[0]
    if n < 4:
        raise ValueError("ellipsoid fit needs at least 4 ions")
    svals = np.linalg.svd(pos - pos.mean(axis=0), compute_uv=False)
    if svals[-1] <= 1e-9 * svals[0]:
        raise ValueError("degenerate (coplanar) configuration cannot "
                         "define an ellipsoid")
    r2, r3 = ratios
    unit = np.empty(3)
    order = axis_order(cfg)
    unit[list(order)] = (1.0, r2, r3)
    rho = np.sqrt(np.sum((pos / unit) ** 2, axis=1))
    shell = max(4, -(-n // 100))  # ceil(n / 100)
    a1 = float(np.mean(np.sort(rho)[-shell:]))
    return EllipsoidShape(a1, a1 * r2, a1 * r3, order)


# ---------------------------------------------------------------------------
# energy minimization

@dataclass(frozen=True)
class MinimizeReport:
    """Outcome of an equilibrium search, positions in the rotating frame."""

    positions: np.ndarray
    energy: float            # rotating-frame potential energy, J
    grad_norm: float         # max |net force component| per ion, N
    iterations: int
    restarts: int
    converged: bool


def _force_tolerance(cfg: TrapConfig) -> float:
    """Default convergence tolerance: 1e-6 of the natural trap force.

    Tighter defaults collide with the double-precision floor of the total
    energy for N of a few hundred (the objective grows like N^(5/3) in
    natural units, so the smallest resolvable gradient grows with N).
    """
    m = cfg.species.mass
    return 1e-6 * m * cfg.omega_z ** 2 * _coulomb_length(cfg)


def minimize_local(positions: np.ndarray, cfg: TrapConfig,
                   tol: float | None = None, *, eps: float = 1e-8,
                   method: str = "auto",
                   maxiter: int = 20000) -> MinimizeReport:
    """Quasi-Newton descent to a local minimum of the rotating-frame energy.

    Terminates when every net-force component is at most ``tol`` (newtons;
    default 1e-7 of the natural trap force m wz^2 ell).  Non-convergence
    within ``maxiter`` gradient evaluations returns a report with
    ``converged=False`` rather than raising.
    """
    cx, cy, cz = confinement_coefficients(cfg)
    if min(cx, cy) <= 0.0:
        raise ValueError(
            f"no planar confinement at this working point: C_x={cx:.3g}, "
            f"C_y={cy:.3g}")
    m, q = cfg.species.mass, cfg.species.charge
    ell = _coulomb_length(cfg)
    e_unit = m * cfg.omega_z ** 2 * ell * ell
    coef = m * cfg.omega_z ** 2 * np.array([cx, cy, cz])
    if tol is None:
        tol = _force_tolerance(cfg)
    gtol_scaled = tol * ell / e_unit

    def fun(s):
        pos = s.reshape(-1, 3) * ell
        res = coulomb.solve(coulomb.ChargeSystem(pos, q), eps=eps,
                            method=method)
        u = rotating_potential_energy(pos, cfg, phi=res.phi)
        grad = (coef * pos - q * res.efield) * (ell / e_unit)
        return u / e_unit, grad.ravel()

    x = np.asarray(positions, dtype=float).reshape(-1, 3).ravel() / ell
    iterations = 0
    grad_max = np.inf
    for _ in range(6):  # re-warm after premature f-convergence stops
        out = _minimize(fun, x, jac=True, method="L-BFGS-B",
                        options={"maxiter": maxiter - iterations,
                                 "maxcor": 20, "gtol": gtol_scaled,
                                 "ftol": 1e-18})
        x = out.x
        iterations += out.nit
        grad_max = np.max(np.abs(out.jac)) * e_unit / ell
        if grad_max <= tol or iterations >= maxiter or out.nit == 0:
            break
    pos = x.reshape(-1, 3) * ell
    energy = rotating_potential_energy(pos, cfg)
    return MinimizeReport(pos, float(energy), float(grad_max), iterations,
                          restarts=1, converged=bool(grad_max <= tol))


def _ellipsoid_seed(n: int, cfg: TrapConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Uniform random fill of the predicted ellipsoid at cold-fluid density."""
    shape = predicted_shape(cfg, n)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.random(n) ** (1.0 / 3.0)
    return dirs * radii[:, None] * shape.semi_axes_xyz


def find_equilibrium(n: int, cfg: TrapConfig, restarts: int = 3,
                     nudge: float | None = None,
                     rng: np.random.Generator | None = None, *,
                     tol: float | None = None, eps: float = 1e-8,
                     method: str = "auto",
                     maxiter: int = 20000) -> MinimizeReport:
    """Best local minimum over ``restarts`` nudged minimizations.

    The first seed fills the predicted cold-fluid ellipsoid uniformly;
    each later restart nudges the best positions found so far by Gaussian
    noise of standard deviation ``nudge`` (default: 0.3 Wigner-Seitz
    radii).  Only the best-found configuration is returned; it is not
    guaranteed to be the global minimum.  Deterministic for a given rng.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    if rng is None:
        rng = np.random.default_rng(0)
    if nudge is None:
        nudge = 0.3 * wigner_seitz_radius(cfg)
    best = minimize_local(_ellipsoid_seed(n, cfg, rng), cfg, tol,
                          eps=eps, method=method, maxiter=maxiter)
    iterations = best.iterations
    for _ in range(restarts - 1):
        seed = best.positions + rng.normal(size=best.positions.shape) * nudge
        trial = minimize_local(seed, cfg, tol, eps=eps, method=method,
                               maxiter=maxiter)
        iterations += trial.iterations
        better = trial.energy < best.energy
        if (trial.converged and (better or not best.converged)) \
                or (not best.converged and better):
            best = trial
    return replace(best, iterations=iterations, restarts=restarts)
