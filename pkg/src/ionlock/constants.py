"""Physical constants and package-wide default operating point.

The defaults describe a single laser-cooled barium ion in a linear trap,
read out interferometrically at 493 nm. The mean detected count rate is
chosen such that the displacement-equivalent shot-noise floor of the
linearized readout is exactly 1.0 nm^2/Hz (see
``detection.shot_floor_displacement_density``).
"""

import math

from scipy import constants as _sc

HBAR = _sc.hbar
KB = _sc.k
ATOMIC_MASS = _sc.u

# --- default ion / trap -------------------------------------------------
DEFAULT_MASS = 138.0 * ATOMIC_MASS          # kg
DEFAULT_OMEGA0 = 2 * math.pi * 1.039e6      # rad/s, axial secular frequency
DEFAULT_GAMMA = 2 * math.pi * 380.0         # rad/s, cooling (energy) rate
DEFAULT_TEMPERATURE = 1.84e-3               # K, gives 51 nm rms excursion

# --- default detection channel ------------------------------------------
DEFAULT_WAVELENGTH = 493e-9                 # m
DEFAULT_VISIBILITY = 0.73
DEFAULT_THETA = math.radians(55.0)          # projection angle trap axis/optics

_k = 2 * math.pi / DEFAULT_WAVELENGTH
# Mean rate such that 1/(2 i0 V^2 k^2 cos^2Theta) = 1.0 nm^2/Hz, i.e. the
# one-sided shot floor (2 i0 in rate units) referred to displacement is the
# headline 1.0 nm^2/Hz sensitivity.  ~1.756e4 counts/s.
DEFAULT_COUNT_RATE = 1.0 / (
    2.0
    * 1.0e-18
    * DEFAULT_VISIBILITY**2
    * _k**2
    * math.cos(DEFAULT_THETA) ** 2
)

# --- default acquisition grid -------------------------------------------
DEFAULT_DT = 25e-9                          # s, integrator step
DEFAULT_BIN_DT = 50e-9                      # s, photon-count bin

SCENARIO_SCHEMA_VERSION = 1
