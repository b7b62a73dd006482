"""Semi-analytic prediction of post-cooling planar temperatures.

This module evaluates the steady state of perpendicular Doppler cooling for a
rotating 3D ion crystal without running dynamics.  The crystal is modeled as a
uniform-density ellipsoid (bounds and density from :mod:`penningmd.equilibrium`)
rotating rigidly at ``omega_r`` about z.  A planar cooling beam propagates
along +x with a Gaussian intensity profile centered on ``(y, z) = (offset, 0)``;
a pair of uniform axial beams contributes only recoil heating.

For a planar temperature ``T`` the in-plane velocities relative to the local
rotation flow are Maxwellian with thermal scale ``u = sqrt(2 k_B T / m)``.
Averaging the photon-scattering energy exchange over that distribution and
over the crystal volume gives the net planar energy change rate

    de_dt(u) = (gamma0 S_perp rho hbar k / sqrt(pi)) * u *
               Integral dV dv  (v + v_rec/u) exp(-v^2) G(y, z)
               / (1 + 2 S_perp G(y, z) + ((Delta - k omega_r y)/(gamma0/2)
                  - (k u/(gamma0/2)) v)^2)

where ``v`` is the velocity along the beam in units of ``u`` measured from the
local flow ``omega_r y``, ``G`` is the normalized Gaussian beam profile, and
``v_rec = 5 hbar k / 6 m`` is the effective recoil velocity of the scattering
cycle.  The work done by the beam against the crystal's rotation (torque times
``omega_r``, exactly ``-omega_r hbar k y`` per scattering event) is folded into
the ``v``-substitution; ``include_wall_torque=False`` restores the unfolded
numerator so the term's influence can be measured.

The equilibrium temperature is the root of
``de_dt(u) + recoil_heating = 0`` in ``u``; a stable balance crosses zero from
heating (positive, recoil-dominated at small ``u``) to cooling (negative).

All integrals use nested adaptive Gauss-panel quadrature: velocity innermost
with panels seeded at the Doppler resonance (analytic width ``~gamma0/(2 k u)``
in velocity, i.e. ``gamma0/k`` scale in physical units), then the beam-plane
coordinate, then the axial coordinate.  An infinite ``w_z`` collapses the
axial integral to the ellipsoid cross-section area analytically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .constants import HBAR, KB
from .equilibrium import cold_fluid_density, predicted_shape
from .model import IonSpecies, TrapConfig

__all__ = [
    "CoolingTheoryParams",
    "NoEquilibriumError",
    "QuadratureError",
    "de_dt",
    "equilibrium_temperature",
    "recoil_heating",
    "temperature_map",
]


class QuadratureError(RuntimeError):
    """An adaptive quadrature failed to reach its error target."""


class NoEquilibriumError(RuntimeError):
    """The energy balance has no root in the searched bracket."""


@dataclass(frozen=True)
class CoolingTheoryParams:
    """Crystal and beam parameters for the cooling energy balance.

    The crystal is a uniform-density ellipsoid with semi-axes
    ``semi_axes = (a_x, a_y, a_z)`` rotating at ``omega_r`` about z.  The
    planar beam propagates along +x, offset by ``offset`` along y, with
    Gaussian 1/e half-widths ``w_y`` and ``w_z`` (``math.inf`` for a uniform
    profile in that direction) and peak saturation ``s_perp``.
    ``detuning_perp`` is the laser detuning from the cooling transition in
    rad/s (the local Doppler shift of the rotating flow can make a
    lab-blue-detuned beam effectively red-detuned over most of the crystal).
    ``s_par`` is the per-beam saturation of the two uniform axial beams,
    which enter only through recoil heating.

    ``wavenumber``, ``linewidth``, and ``recoil_velocity`` default to the
    species' photon wavenumber, natural linewidth, and ``5 hbar k / 6 m``.
    """

    species: IonSpecies
    density: float
    semi_axes: tuple[float, float, float]
    n_ions: int
    omega_r: float
    s_perp: float
    detuning_perp: float
    offset: float
    w_y: float
    w_z: float = math.inf
    s_par: float = 0.0
    wavenumber: float | None = None
    linewidth: float | None = None
    recoil_velocity: float | None = None

    def __post_init__(self) -> None:
        if self.wavenumber is None:
            object.__setattr__(self, "wavenumber", self.species.k_photon)
        if self.linewidth is None:
            object.__setattr__(self, "linewidth", self.species.linewidth)
        if self.recoil_velocity is None:
            object.__setattr__(
                self,
                "recoil_velocity",
                5.0 * HBAR * self.wavenumber / (6.0 * self.species.mass),
            )
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        if self.density <= 0.0:
            raise ValueError("density must be positive")
        if len(self.semi_axes) != 3 or any(a <= 0.0 for a in self.semi_axes):
            raise ValueError("semi_axes must be three positive lengths")
        if self.n_ions < 1:
            raise ValueError("n_ions must be at least 1")
        if self.omega_r < 0.0 or not math.isfinite(self.omega_r):
            raise ValueError("omega_r must be finite and non-negative")
        if self.s_perp < 0.0 or self.s_par < 0.0:
            raise ValueError("saturation parameters must be non-negative")
        if not (self.w_y > 0.0 and self.w_z > 0.0):
            raise ValueError("beam widths must be positive (math.inf allowed)")
        if not math.isfinite(self.detuning_perp):
            raise ValueError("detuning_perp must be finite")
        if not math.isfinite(self.offset):
            raise ValueError("offset must be finite")
        if self.wavenumber <= 0.0 or self.linewidth <= 0.0:
            raise ValueError("wavenumber and linewidth must be positive")
        if self.recoil_velocity < 0.0:
            raise ValueError("recoil_velocity must be non-negative")

    @classmethod
    def for_crystal(
        cls,
        cfg: TrapConfig,
        n: int,
        *,
        s_perp: float,
        detuning_perp: float,
        offset: float,
        w_y: float,
        w_z: float = math.inf,
        s_par: float = 0.0,
    ) -> "CoolingTheoryParams":
        """Build params for an ``n``-ion crystal in the given trap.

        Density and ellipsoid bounds come from the cold-fluid equilibrium
        shape for this trap and ion count.
        """
        shape = predicted_shape(cfg, n)
        return cls(
            species=cfg.species,
            density=cold_fluid_density(cfg),
            semi_axes=tuple(shape.semi_axes_xyz),
            n_ions=n,
            omega_r=cfg.omega_r,
            s_perp=s_perp,
            detuning_perp=detuning_perp,
            offset=offset,
            w_y=w_y,
            w_z=w_z,
            s_par=s_par,
        )


# ----------------------------------------------------------------- quadrature

_G7_NODES, _G7_WEIGHTS = np.polynomial.legendre.leggauss(7)
_G15_NODES, _G15_WEIGHTS = np.polynomial.legendre.leggauss(15)
_ALL_NODES = np.concatenate([_G7_NODES, _G15_NODES])

# Velocity integration half-range in units of the thermal scale u.  The
# Maxwellian factor exp(-v^2) is ~1e-28 at the cut.
_V_MAX = 8.0


def _eval_panels(f, lo, hi):
    """Evaluate 7- and 15-point Gauss rules of vectorized f on each panel.

    Returns per-panel 15-point values, the |15pt - 7pt| error estimates, and
    the 15-point estimates of the integral of |f| (the L1 mass used to scale
    relative tolerances).
    """
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    x = (mid[:, None] + half[:, None] * _ALL_NODES).ravel()
    fx = np.asarray(f(x), dtype=float).reshape(lo.size, 22)
    i7 = half * (fx[:, :7] @ _G7_WEIGHTS)
    i15 = half * (fx[:, 7:] @ _G15_WEIGHTS)
    return i15, np.abs(i15 - i7), half * (np.abs(fx[:, 7:]) @ _G15_WEIGHTS)


def _adaptive_panels(f, knots, rel_tol, max_rounds, what):
    """Adaptively integrate vectorized scalar ``f`` over ``[min(knots), max(knots)]``.

    Starts from the panel edges in ``knots`` and bisects panels until the
    summed 7- vs 15-point discrepancy drops below ``rel_tol`` times the L1
    mass of the integrand.  Panel results are cached across rounds; only new
    halves are re-evaluated.
    """
    knots = np.unique(np.asarray(knots, dtype=float))
    lo, hi = knots[:-1], knots[1:]
    i15, err, l1 = _eval_panels(f, lo, hi)

    for round_ in range(max_rounds + 1):
        tol = rel_tol * l1.sum()
        if err.sum() <= tol:
            return float(i15.sum())
        if round_ == max_rounds:
            raise QuadratureError(
                f"{what} did not converge after {max_rounds} refinements "
                f"(error {err.sum():.3e}, target {tol:.3e})"
            )
        split = err > tol / (2.0 * lo.size)
        if not split.any():
            split[np.argmax(err)] = True
        mid = 0.5 * (lo[split] + hi[split])
        new_lo = np.concatenate([lo[split], mid])
        new_hi = np.concatenate([mid, hi[split]])
        n_i15, n_err, n_l1 = _eval_panels(f, new_lo, new_hi)
        lo = np.concatenate([lo[~split], new_lo])
        hi = np.concatenate([hi[~split], new_hi])
        i15 = np.concatenate([i15[~split], n_i15])
        err = np.concatenate([err[~split], n_err])
        l1 = np.concatenate([l1[~split], n_l1])


def _velocity_integrals(u, y, g, p: CoolingTheoryParams, c_num, rel_tol, max_rounds):
    """Batched adaptive velocity integrals, one per spatial point.

    For each point j with beam profile value ``g_j`` at in-plane position
    ``y_j`` this computes

        I_j = int_{-8}^{8} (v + c_j/u) exp(-v^2) g_j
              / (1 + 2 s_perp g_j + (A_j - B v)^2) dv

    with ``A_j = (detuning - k omega_r y_j) / (gamma0/2)`` and
    ``B = k u / (gamma0/2)``.  Initial panels combine a fixed grid resolving
    the Maxwellian with knots packed around the Doppler resonance
    ``v = A_j / B`` at its saturation-broadened width ``sqrt(1+2 s g_j)/B``.
    Points whose error estimate misses the target have their panel count
    doubled, up to ``max_rounds`` times.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    g = np.broadcast_to(np.asarray(g, dtype=float), y.shape)
    c = np.broadcast_to(np.asarray(c_num, dtype=float), y.shape) / u
    gamma_half = 0.5 * p.linewidth
    A = (p.detuning_perp - p.wavenumber * p.omega_r * y) / gamma_half
    B = p.wavenumber * u / gamma_half
    s0 = p.s_perp

    base = np.array([-_V_MAX, -5.0, -3.0, -1.5, 0.0, 1.5, 3.0, 5.0, _V_MAX])
    scales = np.array([-27.0, -9.0, -3.0, -1.0, 0.0, 1.0, 3.0, 9.0, 27.0])
    width = np.sqrt(1.0 + 2.0 * s0 * g) / B
    knots = np.concatenate(
        [
            np.broadcast_to(base, (y.size, base.size)),
            (A / B)[:, None] + width[:, None] * scales,
        ],
        axis=1,
    )
    knots = np.clip(knots, -_V_MAX, _V_MAX)
    knots.sort(axis=1)

    def evaluate(idx, kn):
        lo, hi = kn[:, :-1], kn[:, 1:]
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        x = mid[..., None] + half[..., None] * _ALL_NODES
        Aj = A[idx][:, None, None]
        gj = g[idx][:, None, None]
        cj = c[idx][:, None, None]
        f = (x + cj) * np.exp(-x * x) * gj / (1.0 + 2.0 * s0 * gj + (Aj - B * x) ** 2)
        i7 = half * (f[..., :7] @ _G7_WEIGHTS)
        i15 = half * (f[..., 7:] @ _G15_WEIGHTS)
        l1 = half * (np.abs(f[..., 7:]) @ _G15_WEIGHTS)
        return i15.sum(axis=1), np.abs(i15 - i7).sum(axis=1), l1.sum(axis=1)

    out = np.empty(y.size)
    idx = np.arange(y.size)
    floor = 0.0
    for round_ in range(max_rounds + 1):
        vals, errs, l1s = evaluate(idx, knots)
        if round_ == 0:
            floor = 1e-12 * (l1s.max() if l1s.size else 0.0)
        ok = errs <= rel_tol * l1s + floor
        out[idx[ok]] = vals[ok]
        if ok.all():
            return out
        idx = idx[~ok]
        knots = knots[~ok]
        mids = 0.5 * (knots[:, :-1] + knots[:, 1:])
        knots = np.concatenate([knots, mids], axis=1)
        knots.sort(axis=1)
    raise QuadratureError(
        f"velocity quadrature did not converge for {idx.size} point(s) after "
        f"{max_rounds} refinements"
    )


# -------------------------------------------------------------- energy balance


def de_dt(
    u: float,
    params: CoolingTheoryParams,
    *,
    include_wall_torque: bool = True,
    rel_tol: float = 1e-8,
    max_refinements: int = 12,
) -> float:
    """Net planar energy change rate (W) from the planar beam at thermal scale u.

    ``u = sqrt(2 k_B T_perp / m)`` is the planar thermal velocity scale in m/s.
    Negative values mean net cooling.  The result includes the photon-recoil
    heating of the planar beam itself and the work done against the rotating
    crystal (the torque contribution, ``-omega_r hbar k y`` per scattering);
    pass ``include_wall_torque=False`` to drop the torque work.

    ``rel_tol`` is the quadrature error target relative to the L1 mass of the
    integrand at every nesting level; quadrature failure raises
    :class:`QuadratureError`.
    """
    if u <= 0.0:
        raise ValueError("u must be positive")
    if params.s_perp == 0.0:
        return 0.0
    p = params
    a_x, a_y, a_z = p.semi_axes
    k, omega_r, d = p.wavenumber, p.omega_r, p.offset
    v_tol = 0.1 * rel_tol

    def beam_profile(yv, g_z):
        if math.isinf(p.w_y):
            return np.full_like(yv, g_z)
        t = (yv - d) / p.w_y
        return np.exp(-t * t) * g_z

    def numerator_shift(yv):
        if include_wall_torque:
            return np.full_like(yv, p.recoil_velocity)
        return p.recoil_velocity + omega_r * yv

    def y_knots(ymax):
        """Beam-plane panel seeds: ellipse edge, beam waist, Doppler band."""
        pts = [-ymax, 0.0, ymax]
        if math.isfinite(p.w_y):
            pts += [d + p.w_y * s for s in (-4.0, -2.0, -1.0, 1.0, 2.0, 4.0)]
        if omega_r > 0.0:
            y_res = p.detuning_perp / (k * omega_r)
            half_band = u / omega_r
            pts += [y_res + half_band * s for s in (-8.0, -4.0, -2.0, 0.0, 2.0, 4.0, 8.0)]
        pts = np.clip(np.asarray(pts, dtype=float), -ymax, ymax)
        return np.arcsin(pts / ymax)

    if math.isinf(p.w_z):
        # Axial profile uniform: the x- and z-integrals reduce to the area of
        # the ellipsoid cross-section, pi a_x a_z (1 - (y/a_y)^2).  With
        # y = a_y sin(alpha) the area and the dy Jacobian combine to cos^3.
        def f_alpha(alphas):
            yv = a_y * np.sin(alphas)
            iv = _velocity_integrals(
                u, yv, beam_profile(yv, 1.0), p, numerator_shift(yv), v_tol, max_refinements
            )
            return np.cos(alphas) ** 3 * iv

        volume_integral = (
            np.pi
            * a_x
            * a_y
            * a_z
            * _adaptive_panels(
                f_alpha, y_knots(a_y), rel_tol, max_refinements, "beam-plane quadrature"
            )
        )
    else:
        # Full axial structure: z = a_z zeta, y = a_y sqrt(1-zeta^2) sin(alpha);
        # the x-chord 2 a_x sqrt(1 - (y/a_y)^2 - zeta^2) and the Jacobians give
        # the smooth weight (1-zeta^2) cos^2(alpha).
        def f_zeta(zetas):
            res = np.empty_like(zetas)
            for i, zeta in enumerate(zetas):
                ymax = a_y * math.sqrt(max(1.0 - zeta * zeta, 0.0))
                if ymax == 0.0:
                    res[i] = 0.0
                    continue
                g_z = math.exp(-((a_z * zeta / p.w_z) ** 2))

                def f_alpha(alphas):
                    yv = ymax * np.sin(alphas)
                    iv = _velocity_integrals(
                        u,
                        yv,
                        beam_profile(yv, g_z),
                        p,
                        numerator_shift(yv),
                        v_tol,
                        max_refinements,
                    )
                    return np.cos(alphas) ** 2 * iv

                res[i] = (1.0 - zeta * zeta) * _adaptive_panels(
                    f_alpha,
                    y_knots(ymax),
                    0.3 * rel_tol,
                    max_refinements,
                    "beam-plane quadrature",
                )
            return res

        zeta_knots = [-1.0, 0.0, 1.0] + list(
            np.clip([s * p.w_z / a_z for s in (-2.0, -1.0, 1.0, 2.0)], -1.0, 1.0)
        )
        volume_integral = (
            2.0
            * a_x
            * a_y
            * a_z
            * _adaptive_panels(
                f_zeta, zeta_knots, rel_tol, max_refinements, "axial quadrature"
            )
        )

    prefactor = p.linewidth * p.s_perp * p.density * HBAR * k / math.sqrt(math.pi)
    return float(prefactor * u * volume_integral)


def recoil_heating(params: CoolingTheoryParams) -> float:
    """Recoil heating rate (W) of the two uniform axial beams.

    Each beam scatters at rate ``gamma0 s_par / (1 + s_par)`` per ion (uniform
    intensity), depositing ``(hbar k)^2 / 2m`` per event, one third of which
    heats each Cartesian direction; the result is doubled for the pair of
    counter-propagating beams.
    """
    p = params
    if p.s_par == 0.0:
        return 0.0
    per_beam = (
        p.linewidth * p.s_par * p.n_ions / (3.0 * (1.0 + p.s_par))
    ) * (HBAR * p.wavenumber) ** 2 / (2.0 * p.species.mass)
    return 2.0 * per_beam


def equilibrium_temperature(
    params: CoolingTheoryParams,
    *,
    bracket: tuple[float, float] = (1e-3, 1e3),
    rel_tol: float = 1e-8,
    max_refinements: int = 12,
    n_probe: int = 25,
) -> float:
    """Planar temperature (K) at which beam cooling balances recoil heating.

    Probes ``de_dt(u) + recoil_heating`` on a geometric grid of ``n_probe``
    points across ``bracket`` (in m/s), expanding until a sign change is
    found, then polishes the root with Brent's method and returns
    ``T = m u^2 / (2 k_B)``.  Raises :class:`NoEquilibriumError` if the
    balance has no root in the bracket.
    """
    p = params
    heating = recoil_heating(p)

    def balance(u):
        return de_dt(u, p, rel_tol=rel_tol, max_refinements=max_refinements) + heating

    u_lo, u_hi = bracket
    if not (0.0 < u_lo < u_hi):
        raise ValueError("bracket must satisfy 0 < lo < hi")
    if n_probe < 2:
        raise ValueError("n_probe must be at least 2")
    probes = np.geomspace(u_lo, u_hi, n_probe)
    g_prev = balance(probes[0])
    for i in range(1, n_probe):
        g_next = balance(probes[i])
        if g_prev == 0.0:
            u_eq = probes[i - 1]
            break
        if np.sign(g_next) != np.sign(g_prev):
            u_eq = brentq(balance, probes[i - 1], probes[i], xtol=1e-10, rtol=1e-12)
            break
        g_prev = g_next
    else:
        if g_prev == 0.0:
            u_eq = probes[-1]
        else:
            raise NoEquilibriumError("no equilibrium (runaway heating/cooling)")
    return float(p.species.mass * u_eq**2 / (2.0 * KB))


def temperature_map(
    w_y_values,
    detunings,
    params: CoolingTheoryParams,
    *,
    rel_tol: float = 1e-8,
    max_refinements: int = 12,
) -> np.ndarray:
    """Equilibrium temperature (K) over a grid of beam waist and detuning.

    Returns an array of shape ``(len(w_y_values), len(detunings))``; cells
    whose energy balance has no equilibrium hold ``nan``.  Cells are
    independent (the map is a pure function of the grid).
    """
    w_y_values = np.atleast_1d(np.asarray(w_y_values, dtype=float))
    detunings = np.atleast_1d(np.asarray(detunings, dtype=float))
    if w_y_values.size == 0 or detunings.size == 0:
        raise ValueError("temperature_map requires a non-empty grid")
    out = np.full((w_y_values.size, detunings.size), np.nan)
    for i, w_y in enumerate(w_y_values):
        for j, det in enumerate(detunings):
            cell = replace(params, w_y=float(w_y), detuning_perp=float(det))
            try:
                out[i, j] = equilibrium_temperature(
                    cell, rel_tol=rel_tol, max_refinements=max_refinements
                )
            except NoEquilibriumError:
                pass
    return out
