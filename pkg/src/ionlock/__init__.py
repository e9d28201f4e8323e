"""Shot-noise-limited readout and phase locking of a trapped ion's motion.

The package simulates the axial motion of a single laser-cooled ion as a
damped stochastic harmonic oscillator, converts it into a photon-count
stream through an interferometric fringe, and provides the signal chain
used to analyse and phase-lock that motion: Welch spectra, displacement
calibration, Lorentzian fits, lock-in demodulation, a trap-frequency PLL,
and intensity-correlation spectroscopy.

Subpackages select a compiled extension for the hot loops when available
and fall back to a pure-numpy implementation otherwise; see
``ionlock.kernels.BACKEND``.
"""

from . import constants, control, detection, dsp, harness, io, kernels, oscillator
from .errors import (
    AnalysisError,
    CalibrationError,
    ConfigurationError,
    FitError,
    IonlockError,
    MemoryBudgetError,
    NumericalFault,
)

__version__ = "0.1.0"

__all__ = [
    "constants",
    "control",
    "detection",
    "dsp",
    "harness",
    "io",
    "kernels",
    "oscillator",
    "IonlockError",
    "ConfigurationError",
    "NumericalFault",
    "MemoryBudgetError",
    "CalibrationError",
    "FitError",
    "AnalysisError",
    "__version__",
]
