"""Molecular dynamics and analysis for 3D ion crystals in a Penning trap.

Subpackages/modules:

* ``model``       -- species, trap working point, states, frames, energies
* ``coulomb``     -- direct and fast-multipole Coulomb field solvers
* ``integrator``  -- cyclotronic split-operator time stepping
* ``lasers``      -- Doppler-cooling beams and stochastic photon kicks
* ``equilibrium`` -- crystal equilibria and cold-fluid shape theory
* ``modes``       -- linearized normal modes and branch diagnostics
* ``thermal``     -- thermal initialization and temperature estimators
* ``cooltheory``  -- semi-analytic laser-cooling temperature predictions
"""

from .model import (
    EnergyReport,
    IonSpecies,
    IonState,
    TrapConfig,
    be9,
    beta,
    confinement_coefficients,
    energy_report,
    from_rotating_frame,
    to_rotating_frame,
)

__version__ = "0.1.0"

__all__ = [
    "EnergyReport",
    "IonSpecies",
    "IonState",
    "TrapConfig",
    "be9",
    "beta",
    "confinement_coefficients",
    "energy_report",
    "from_rotating_frame",
    "to_rotating_frame",
    "__version__",
]
