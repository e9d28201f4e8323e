"""Exception hierarchy."""


class IonlockError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IonlockError):
    """Invalid parameter, scenario key, or precondition violation."""


class NumericalFault(IonlockError):
    """Non-finite state or other numerical breakdown during simulation."""


class MemoryBudgetError(IonlockError):
    """Requested record does not fit the in-memory budget.

    Raised instead of silently allocating tens of gigabytes; the message
    points at the streaming API.
    """


class CalibrationError(IonlockError):
    """Displacement calibration could not be established from the data."""


class FitError(IonlockError):
    """Nonlinear fit failed to converge or the data cannot constrain it."""


class AnalysisError(IonlockError):
    """An analysis stage received data it cannot work with."""
