"""Physical constants and 9Be+ defaults. SI units throughout the package."""

from scipy import constants as _const

QE = _const.elementary_charge            # elementary charge, C
EPS0 = _const.epsilon_0                  # vacuum permittivity, F/m
KE = 1.0 / (4.0 * _const.pi * EPS0)      # Coulomb constant, N m^2 C^-2
KB = _const.Boltzmann                    # J/K
HBAR = _const.hbar                       # J s
AMU = _const.atomic_mass                 # kg

# 9Be+ cooling transition (2s -> 2p).
M_BE9 = 9.012182 * AMU                   # ion mass, kg
WAVELENGTH_BE9 = 313.0e-9                # cooling wavelength, m
LINEWIDTH_BE9 = 2.0 * _const.pi * 18.0e6  # natural linewidth gamma0, rad/s
