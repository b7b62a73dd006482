"""Laser-cooling beams: saturation profiles, scattering rates, recoil kicks.

An ion moving with velocity v in beam ``l`` absorbs photons at the
saturation-broadened Lorentzian rate

    gamma_L = S(x) g0 (g0/2)^2 / [ (g0/2)^2 (1 + 2 S(x)) + (Delta - k.v)^2 ],

where ``g0`` is the natural linewidth, ``Delta`` the (signed, lab-frame)
detuning from the cooling transition, and ``S(x)`` the local saturation
intensity.  The photon count in a timestep is a Poisson draw with mean
``gamma_L dt``; each absorbed photon changes the ion velocity by
``hbar k khat / m`` (absorption) plus ``hbar k qhat / m`` with ``qhat``
uniform on the unit sphere (spontaneous emission).

Beam profiles are either uniform or 2D-Gaussian over the lab (y, z) plane
-- the natural transverse coordinates for a beam propagating along x --
with S(y, z) = S0 exp[-(y - d)^2 / w_y^2 - z^2 / w_z^2] (no factor of 2 in
the exponent; the waist is the 1/e radius of the saturation intensity).

The standard cooling geometry is a symmetric pair of uniform axial beams
(so their mean momentum kicks cancel) plus one Gaussian planar beam along
+x offset from the trap axis, which removes energy from the rotating
crystal because ions co-moving with the beam at the offset scatter
preferentially.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import HBAR, KB
from .model import IonSpecies, IonState, TrapConfig

__all__ = [
    "BeamConfig",
    "doppler_temperature",
    "recoil_kick",
    "sample_emission",
    "sample_kicks",
    "sample_photons",
    "saturation",
    "scattering_rate",
    "standard_setup",
]

_PROFILES = ("uniform", "gaussian2d")


@dataclass(frozen=True)
class BeamConfig:
    """One cooling beam: direction, frequency offsets, and intensity profile.

    ``detuning`` is the lab-frame value that enters the scattering rate
    directly; for a beam addressing a rotating crystal off-axis the
    co-moving ions see it shifted by -k.v_rotation.
    """

    khat: np.ndarray                  # propagation direction, unit vector
    wavenumber: float                 # k, rad/m
    detuning: float                   # Delta, rad/s, signed
    s_peak: float                     # peak saturation intensity S0
    linewidth: float                  # natural linewidth g0, rad/s
    profile: str = "uniform"          # "uniform" | "gaussian2d"
    offset: float = 0.0               # Gaussian centre y = offset, m
    waist_y: float = field(default=np.nan)  # 1/e radius along y, m
    waist_z: float = field(default=np.nan)  # 1/e radius along z, m

    def __post_init__(self):
        khat = np.asarray(self.khat, dtype=float).reshape(3)
        norm = np.linalg.norm(khat)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("beam direction khat must be a nonzero vector")
        object.__setattr__(self, "khat", khat / norm)
        if not self.wavenumber > 0.0:
            raise ValueError("beam wavenumber must be positive")
        if self.s_peak < 0.0:
            raise ValueError("peak saturation s_peak must be nonnegative")
        if not self.linewidth > 0.0:
            raise ValueError("natural linewidth must be positive")
        if self.profile not in _PROFILES:
            raise ValueError(f"unknown beam profile {self.profile!r}; "
                             f"expected one of {_PROFILES}")
        if self.profile == "gaussian2d":
            if not (self.waist_y > 0.0 and self.waist_z > 0.0):
                raise ValueError("gaussian2d beams need positive waists")


def saturation(beam: BeamConfig, positions: np.ndarray) -> np.ndarray | float:
    """Local saturation intensity S(x) at the given position(s)."""
    pos = np.asarray(positions, dtype=float)
    single = pos.ndim == 1
    pos = np.atleast_2d(pos)
    if beam.profile == "uniform":
        s = np.full(pos.shape[0], beam.s_peak)
    else:
        arg = (((pos[:, 1] - beam.offset) / beam.waist_y) ** 2
               + (pos[:, 2] / beam.waist_z) ** 2)
        s = beam.s_peak * np.exp(-arg)
    return float(s[0]) if single else s


def scattering_rate(beam: BeamConfig, positions: np.ndarray,
                    velocities: np.ndarray) -> np.ndarray | float:
    """Photon absorption rate (1/s) for ion(s) at the given phase points."""
    pos = np.asarray(positions, dtype=float)
    vel = np.asarray(velocities, dtype=float)
    single = pos.ndim == 1
    pos, vel = np.atleast_2d(pos), np.atleast_2d(vel)
    s = np.atleast_1d(saturation(beam, pos))
    half = 0.5 * beam.linewidth
    doppler = beam.detuning - beam.wavenumber * (vel @ beam.khat)
    rate = (s * beam.linewidth * half * half
            / (half * half * (1.0 + 2.0 * s) + doppler * doppler))
    return float(rate[0]) if single else rate


def sample_photons(rate, dt: float,
                   rng: np.random.Generator) -> np.ndarray | int:
    """Poisson photon count(s) for the given absorption rate(s) over dt."""
    mean = np.asarray(rate, dtype=float) * dt
    if np.any(mean < 0.0) or not np.all(np.isfinite(mean)):
        raise ValueError("photon count mean rate*dt must be finite and >= 0")
    out = rng.poisson(mean)
    return int(out) if np.ndim(rate) == 0 else out


def sample_emission(n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 3) spontaneous-emission directions, uniform on the unit sphere."""
    cos_t = rng.uniform(-1.0, 1.0, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    sin_t = np.sqrt(1.0 - cos_t * cos_t)
    return np.column_stack((sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t))


def recoil_kick(beam: BeamConfig, n: int, rng: np.random.Generator,
                mass: float) -> np.ndarray:
    """Velocity change from n scattering events off one beam, (3,) m/s.

    n absorption recoils along the beam plus n independent emission
    recoils in random directions.
    """
    if n < 0:
        raise ValueError("photon count must be nonnegative")
    v_rec = HBAR * beam.wavenumber / mass
    dv = n * v_rec * beam.khat
    if n:
        dv = dv + v_rec * sample_emission(int(n), rng).sum(axis=0)
    return dv


def sample_kicks(state: IonState, beams, dt: float, cfg: TrapConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Per-ion velocity increments (N, 3) from all beams over one timestep.

    Rates are evaluated at the supplied state (the caller passes the
    midpoint state of its splitting scheme); photon numbers are Poisson
    draws and emission directions are isotropic.
    """
    n_ions = state.n_ions
    mass = cfg.species.mass
    dv = np.zeros((n_ions, 3))
    for beam in beams:
        rates = np.atleast_1d(
            scattering_rate(beam, state.positions, state.velocities))
        counts = rng.poisson(rates * dt)
        v_rec = HBAR * beam.wavenumber / mass
        dv += counts[:, None] * (v_rec * beam.khat)
        total = int(counts.sum())
        if total:
            emit = v_rec * sample_emission(total, rng)
            np.add.at(dv, np.repeat(np.arange(n_ions), counts), emit)
    return dv


def standard_setup(species: IonSpecies, delta_perp: float, w_y: float,
                   w_z: float, *, d: float = 5e-6, s_perp0: float = 0.5,
                   s_par0: float = 5e-3, delta_par: float | None = None,
                   detuning_reference: str = "lab",
                   omega_r: float | None = None) -> list[BeamConfig]:
    """The standard cooling geometry: two axial beams plus one planar beam.

    Returns ``[axial +z, axial -z, planar +x]``.  The axial pair is
    symmetric (opposite directions, equal detuning ``delta_par``,
    default -g0/2, and equal uniform intensity ``s_par0``) so the mean
    axial momentum kick cancels.  The planar beam propagates along +x,
    offset to y = d with a 2D-Gaussian profile of waists (w_y, w_z).

    ``detuning_reference`` selects what ``delta_perp`` is measured from:
    "lab" uses it directly in the scattering rate; "corotating" treats it
    as an offset from the resonance of an ion rigidly rotating through
    the beam centre (velocity omega_r * d along +x), i.e. the lab value
    becomes delta_perp + k * omega_r * d, which requires ``omega_r``.
    """
    g0 = species.linewidth
    k = species.k_photon
    if delta_par is None:
        delta_par = -0.5 * g0
    if detuning_reference == "lab":
        delta_lab = delta_perp
    elif detuning_reference == "corotating":
        if omega_r is None:
            raise ValueError("detuning_reference='corotating' needs omega_r")
        delta_lab = delta_perp + k * omega_r * d
    else:
        raise ValueError("detuning_reference must be 'lab' or 'corotating'")
    axial = dict(wavenumber=k, detuning=delta_par, s_peak=s_par0,
                 linewidth=g0, profile="uniform")
    return [
        BeamConfig(khat=np.array([0.0, 0.0, 1.0]), **axial),
        BeamConfig(khat=np.array([0.0, 0.0, -1.0]), **axial),
        BeamConfig(khat=np.array([1.0, 0.0, 0.0]), wavenumber=k,
                   detuning=delta_lab, s_peak=s_perp0, linewidth=g0,
                   profile="gaussian2d", offset=d, waist_y=w_y, waist_z=w_z),
    ]


def doppler_temperature(linewidth: float) -> float:
    """Doppler cooling limit hbar * g0 / (2 kB), in kelvin."""
    return HBAR * linewidth / (2.0 * KB)
