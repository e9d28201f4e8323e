"""Interferometric photon-count channel.

Maps ion displacement to an instantaneous fluorescence rate through the
interference fringe (full sine transduction, or its small-amplitude
linearization) and realizes the shot noise as an inhomogeneous Poisson
process: per-bin Poisson counts for the streaming signal chain, or exact
per-photon timestamps (thinning) for correlation work. Also provides the
analytic photocurrent spectrum the sampled stream must reproduce.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .constants import (
    DEFAULT_COUNT_RATE,
    DEFAULT_THETA,
    DEFAULT_VISIBILITY,
    DEFAULT_WAVELENGTH,
)
from .errors import ConfigurationError
from .oscillator import IonParams, Trajectory, analytic_psd

#: transduction threshold above which the linearized fringe is dubious
LINEAR_VALIDITY_LIMIT = 0.3


@dataclass(frozen=True)
class DetectionParams:
    """Photocount channel parameters.

    i0 is the mean fluorescence rate at the fringe operating point,
    visibility the fringe contrast, theta the projection angle between the
    trap axis and the optical axis, and wavelength the scattered-light
    wavelength. fringe_phase offsets the operating point (0 = midpoint,
    maximum displacement sensitivity; pi/2 = fringe top, used for contrast
    measurements). transduction selects the full sine fringe or its
    linearization.
    """

    i0: float = DEFAULT_COUNT_RATE
    visibility: float = DEFAULT_VISIBILITY
    theta: float = DEFAULT_THETA
    wavelength: float = DEFAULT_WAVELENGTH
    fringe_phase: float = 0.0
    transduction: str = "sine"

    def __post_init__(self):
        if self.i0 <= 0:
            raise ConfigurationError(f"i0 must be positive, got {self.i0}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ConfigurationError(
                f"visibility must be in [0, 1], got {self.visibility}"
            )
        if not 0.0 <= self.theta < math.pi / 2:
            raise ConfigurationError(
                f"theta must be in [0, pi/2), got {self.theta}"
            )
        if self.wavelength <= 0:
            raise ConfigurationError(
                f"wavelength must be positive, got {self.wavelength}"
            )
        if self.transduction not in ("sine", "linear"):
            raise ConfigurationError(
                f"transduction must be 'sine' or 'linear', got {self.transduction!r}"
            )

    @property
    def wavevector(self) -> float:
        """Optical wavevector k = 2 pi / wavelength."""
        return 2 * math.pi / self.wavelength

    @property
    def fringe_wavevector(self) -> float:
        """Displacement-to-fringe-phase factor q = 2 k cos(theta)."""
        return 2 * self.wavevector * math.cos(self.theta)


@dataclass
class CountSeries:
    """Uniformly binned photon counts."""

    bin_dt: float
    counts: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        if self.bin_dt <= 0:
            raise ConfigurationError(f"bin_dt must be positive, got {self.bin_dt}")

    def __len__(self):
        return len(self.counts)

    @property
    def duration(self) -> float:
        return len(self.counts) * self.bin_dt

    @property
    def fs(self) -> float:
        """Sample rate of the binned stream."""
        return 1.0 / self.bin_dt

    def times(self) -> np.ndarray:
        """Bin-center timestamps."""
        return self.start_time + self.bin_dt * (np.arange(len(self.counts)) + 0.5)

    def mean_rate(self) -> float:
        return float(np.sum(self.counts, dtype=np.float64)) / self.duration


def scattering_rate(x, params: DetectionParams):
    """Instantaneous fluorescence rate I0*(1 + V sin(q x + fringe_phase)).

    Bounded in [I0(1-V), I0(1+V)] for any displacement.
    """
    x = np.asarray(x, dtype=float)
    q = params.fringe_wavevector
    return params.i0 * (
        1.0 + params.visibility * np.sin(q * x + params.fringe_phase)
    )


def linearized_rate(x, params: DetectionParams):
    """First-order fringe transduction, exact at the operating point.

    At the midpoint (fringe_phase = 0) this is I0*(1 + V q x); the cubic
    remainder of the sine bounds its deviation from scattering_rate. Emits a
    warning when |q x| exceeds 0.3, where the linearization degrades.
    """
    x = np.asarray(x, dtype=float)
    q = params.fringe_wavevector
    arg = q * x
    if np.max(np.abs(arg), initial=0.0) > LINEAR_VALIDITY_LIMIT:
        warnings.warn(
            "linearized fringe used beyond |2 k x cos(theta)| = "
            f"{LINEAR_VALIDITY_LIMIT} (max {np.max(np.abs(arg)):.3f}); "
            "the sine transduction differs appreciably here",
            stacklevel=2,
        )
    return params.i0 * (
        1.0
        + params.visibility
        * (math.sin(params.fringe_phase) + arg * math.cos(params.fringe_phase))
    )


def _rate_array(x, params: DetectionParams):
    """Rate samples per the configured transduction (no validity warning)."""
    if params.transduction == "sine":
        return scattering_rate(x, params)
    q = params.fringe_wavevector
    r = params.i0 * (
        1.0
        + params.visibility
        * (
            math.sin(params.fringe_phase)
            + (q * np.asarray(x, dtype=float)) * math.cos(params.fringe_phase)
        )
    )
    return np.maximum(r, 0.0, out=r)


def _count_dtype(params: DetectionParams, bin_dt: float):
    # uint8 whenever even the brightest fringe cannot plausibly overflow it
    lam_max = params.i0 * (1.0 + params.visibility) * bin_dt
    return np.uint8 if lam_max < 30.0 else np.int64


def sample_counts(trajectory, params: DetectionParams, bin_dt: float, seed=0) -> CountSeries:
    """Sample per-bin photon counts from a displacement record.

    Parameters
    ----------
    trajectory : Trajectory or iterable of TrajectoryChunk
        Displacement record; the chunk-iterator form (from
        ``oscillator.stream_trajectory``) never materializes the full
        record, so arbitrarily long streams fit in memory.
    params : DetectionParams
    bin_dt : float
        Count bin width; must be an integer multiple of the trajectory dt.
    seed : int or numpy SeedSequence

    Counts in each bin are Poisson with mean = integral of the
    instantaneous rate over the bin (zero-order hold per trajectory step).
    Deterministic per seed; a trailing partial bin is dropped.
    """
    if isinstance(trajectory, Trajectory):
        dt = trajectory.dt
        start_time = trajectory.start_time
        chunk_iter = iter((trajectory.x_samples,))
    else:
        chunk_iter = iter(trajectory)
        try:
            first = next(chunk_iter)
        except StopIteration:
            raise ConfigurationError("empty trajectory stream") from None
        dt = first.dt
        start_time = first.start_time

        def _gen(first_chunk, rest):
            yield first_chunk.x
            for c in rest:
                yield c.x

        chunk_iter = _gen(first, chunk_iter)

    if bin_dt < dt:
        raise ConfigurationError(
            f"bin_dt ({bin_dt}) must be >= trajectory dt ({dt})"
        )
    ratio = bin_dt / dt
    k = int(round(ratio))
    if abs(ratio - k) > 1e-9 * k:
        raise ConfigurationError(
            f"bin_dt ({bin_dt}) must be an integer multiple of dt ({dt})"
        )

    rng = np.random.Generator(np.random.PCG64(seed))
    dtype = _count_dtype(params, bin_dt)
    pieces = []
    carry = np.empty(0)
    for x in chunk_iter:
        rate = _rate_array(x, params)
        if carry.size:
            rate = np.concatenate((carry, rate))
        n_full = len(rate) // k
        if n_full:
            lam = rate[: n_full * k].reshape(n_full, k).sum(axis=1) * dt
            pieces.append(rng.poisson(lam).astype(dtype))
        carry = rate[n_full * k :].copy()
    counts = (
        np.concatenate(pieces) if pieces else np.zeros(0, dtype=dtype)
    )
    return CountSeries(bin_dt=bin_dt, counts=counts, start_time=start_time)


def sample_timestamps(trajectory: Trajectory, params: DetectionParams, seed=0) -> np.ndarray:
    """Exact per-photon arrival times via Poisson thinning.

    Draws candidate arrivals at the peak rate I0(1+V) and keeps each with
    probability rate(x(t))/peak, using the zero-order-hold displacement of
    the enclosing trajectory step. Returns sorted times in seconds.
    """
    if len(trajectory.x_samples) == 0:
        return np.empty(0)
    duration = trajectory.duration
    r_max = params.i0 * (1.0 + params.visibility)
    if r_max <= 0:
        return np.empty(0)
    rng = np.random.Generator(np.random.PCG64(seed))
    n_cand = rng.poisson(r_max * duration)
    t = np.sort(rng.uniform(0.0, duration, n_cand))
    idx = np.minimum(
        (t / trajectory.dt).astype(np.int64), len(trajectory.x_samples) - 1
    )
    rate = _rate_array(trajectory.x_samples[idx], params)
    keep = rng.uniform(0.0, 1.0, n_cand) < rate / r_max
    return trajectory.start_time + t[keep]


def displacement_psd_scale(det: DetectionParams) -> float:
    """Rate-PSD to displacement-PSD factor 1/(4 I0^2 V^2 k^2 cos^2 theta).

    This is the analytic (linearized, unblurred) transduction gain; the
    measured calibration of a real pipeline is CalibrationResult.scale.
    """
    slope = det.i0 * det.visibility * det.fringe_wavevector
    if slope <= 0:
        raise ConfigurationError(
            "displacement scale undefined for i0 = 0 or visibility = 0"
        )
    return 1.0 / slope**2


def shot_floor_displacement_density(det: DetectionParams) -> float:
    """Displacement-equivalent density of the Poisson shot floor (m^2/Hz).

    The one-sided rate spectral density of a Poisson stream at mean rate I0
    is 2 I0 (Schottky), so the floor referred to displacement is
    1/(2 I0 V^2 k^2 cos^2 theta). Defaults give 1.0e-18 m^2/Hz.
    """
    if det.i0 <= 0 or det.visibility <= 0:
        raise ConfigurationError(
            "shot floor is infinite for i0 = 0 or visibility = 0"
        )
    return 2.0 * det.i0 * displacement_psd_scale(det)


def photocurrent_psd_model(ion: IonParams, det: DetectionParams, f) -> np.ndarray:
    """One-sided model spectrum of the count rate (counts^2/s^2/Hz).

    Shot floor 2 I0 plus the linearized motional sideband
    4 I0^2 V^2 k^2 cos^2(theta) * S_x(f); the DC component is excluded.
    """
    floor = 2.0 * det.i0
    slope2 = (det.i0 * det.visibility * det.fringe_wavevector) ** 2
    return floor + slope2 * analytic_psd(ion, f)


def thermal_contrast_factor(det: DetectionParams, sigma: float) -> float:
    """Fringe-contrast blur factor exp(-2 k^2 sigma^2 cos^2 theta).

    Gaussian thermal motion of rms amplitude sigma multiplies the observed
    fringe contrast (and the displacement-to-rate transduction slope) by
    this factor; the motional sideband power carries its square.
    """
    q = det.fringe_wavevector
    return math.exp(-0.5 * (q * sigma) ** 2)
