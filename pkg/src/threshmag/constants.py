"""Physical constants used across the package.

SI units throughout. Values for q, h and c are the exact CODATA 2018 / SI 2019
definitions.
"""

from __future__ import annotations

from dataclasses import dataclass

# CODATA 2018 (exact since the 2019 SI redefinition)
Q_E = 1.602176634e-19  # C
H_PLANCK = 6.62607015e-34  # J s
C_LIGHT = 299792458.0  # m/s

# NV electron gyromagnetic ratio as used for field conversion: 28 Hz per nT.
GAMMA_NV = 28.0e9  # Hz/T

# Number density of carbon atoms in diamond (3.51 g/cm^3, 12.011 g/mol).
DIAMOND_ATOM_DENSITY = 1.76e29  # m^-3
PPM = 1e-6

# Group index of the gain medium (InGaN-like); only enters via v_g = c / n_g.
DEFAULT_GROUP_INDEX = 3.5

PUMP_WAVELENGTH = 532e-9  # m


def ppm_to_density(ppm: float) -> float:
    """NV density in ppm (per carbon atom) to number density in m^-3."""
    return ppm * PPM * DIAMOND_ATOM_DENSITY


def photon_energy(wavelength: float) -> float:
    return H_PLANCK * C_LIGHT / wavelength


@dataclass(frozen=True)
class ConstantsRegistry:
    q: float = Q_E
    h: float = H_PLANCK
    c: float = C_LIGHT
    gamma_nv: float = GAMMA_NV
    diamond_atom_density: float = DIAMOND_ATOM_DENSITY
    group_index: float = DEFAULT_GROUP_INDEX


CONSTANTS = ConstantsRegistry()
