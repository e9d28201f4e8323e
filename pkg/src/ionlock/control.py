"""Phase-locked loop that steers the trap frequency.

The ion plays the voltage-controlled oscillator: mixing the fluorescence
count rate with a reference (in software, exactly as the hardware mixer
would) yields an error signal proportional to a*sin(delta) for oscillation
amplitude a lagging the reference by delta; low-pass filtering and feeding
it back onto the trap frequency closes the loop. Positive error raises
omega_trap, which advances the ion's phase and drives delta back to zero,
so the lock settles on the stable fringe side.

The sequential bin -> count -> filter -> actuate recursion lives in the
kernels module (compiled when available); this module owns configuration,
the chunked driver, and the closed-loop spectral diagnostics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .constants import DEFAULT_DT
from .detection import CountSeries, DetectionParams, displacement_psd_scale
from .dsp import PsdEstimate, QuadratureRecord, lockin, welch_psd
from .errors import AnalysisError, ConfigurationError
from .oscillator import IonParams, OscillatorState, max_step, thermal_state

#: count bin width of the closed-loop signal chain (5 MHz binning)
DEFAULT_LOOP_BIN_DT = 200e-9

DEFAULT_ACTUATOR_LIMIT = 2 * math.pi * 5e3

#: trap-frequency shift (rad/s) applied per meter of filtered error; frozen
#: from a gain sweep: suppression band ~600 Hz, carrier-peak energy fraction
#: ~0.09, no measurable damping, no actuator saturation. Raising it widens
#: the band but erodes the phase margin (the 300 Hz loop pole) and with it
#: the lock quality.
DEFAULT_LOOP_GAIN = 1.0e11

_MAX_RECORDED_UPDATES = 1 << 21
_MAX_LOOP_ORDER = 8


@dataclass(frozen=True)
class ReferenceSignal:
    """Unit-amplitude local oscillator, plain or frequency modulated.

    The instantaneous phase is 2 pi f t + phase0 for the sine variant and
    2 pi f t + index*sin(2 pi f_mod t) + phase0 for fm; the waveform is the
    cosine of that phase.
    """

    kind: str
    frequency: float
    phase0: float = 0.0
    mod_frequency: float = 0.0
    mod_index: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sine", "fm"):
            raise ConfigurationError(f"unknown reference kind {self.kind!r}")
        if self.frequency <= 0:
            raise ConfigurationError(
                f"reference frequency must be positive, got {self.frequency}"
            )
        if self.kind == "fm":
            if self.mod_frequency <= 0:
                raise ConfigurationError(
                    f"fm modulation frequency must be positive, "
                    f"got {self.mod_frequency}"
                )
            if self.mod_index < 0:
                raise ConfigurationError(
                    f"fm modulation index must be >= 0, got {self.mod_index}"
                )

    @staticmethod
    def sine(frequency: float, phase0: float = 0.0) -> "ReferenceSignal":
        return ReferenceSignal(kind="sine", frequency=frequency, phase0=phase0)

    @staticmethod
    def fm(f_carrier: float, f_mod: float = 56.3, index: float = 1.0,
           phase0: float = 0.0) -> "ReferenceSignal":
        return ReferenceSignal(kind="fm", frequency=f_carrier, phase0=phase0,
                               mod_frequency=f_mod, mod_index=index)

    def phase(self, t):
        t = np.asarray(t, dtype=float)
        ph = 2 * math.pi * self.frequency * t + self.phase0
        if self.kind == "fm" and self.mod_index != 0.0:
            ph = ph + self.mod_index * np.sin(2 * math.pi * self.mod_frequency * t)
        return ph

    def value(self, t):
        return np.cos(self.phase(t))


def reference_value(ref: ReferenceSignal, t):
    """Reference waveform cos(phase(t)); unit amplitude."""
    return ref.value(t)


@dataclass(frozen=True)
class LoopConfig:
    """Feedback-path configuration.

    gain maps meters of filtered error to rad/s of trap-frequency shift.
    The loop filter is loop_order cascaded one-pole sections at loop_cutoff
    applied per count bin; integral_gain (rad/s per meter-second) adds an
    optional integrator after the filter, off by default. update_dt is the
    actuation refresh interval and defaults to the count bin width.
    """

    reference: ReferenceSignal
    gain: float = DEFAULT_LOOP_GAIN
    loop_cutoff: float = 300.0
    loop_order: int = 1
    integral_gain: float = 0.0
    actuator_limit: float = DEFAULT_ACTUATOR_LIMIT
    update_dt: float | None = None

    def __post_init__(self):
        if self.loop_cutoff <= 0:
            raise ConfigurationError(
                f"loop_cutoff must be positive, got {self.loop_cutoff}"
            )
        if not 1 <= self.loop_order <= _MAX_LOOP_ORDER:
            raise ConfigurationError(
                f"loop_order must be in [1, {_MAX_LOOP_ORDER}], "
                f"got {self.loop_order}"
            )
        if not math.isfinite(self.gain):
            raise ConfigurationError("gain must be finite")
        if not math.isfinite(self.integral_gain):
            raise ConfigurationError("integral_gain must be finite")
        if self.actuator_limit <= 0:
            raise ConfigurationError(
                f"actuator_limit must be positive, got {self.actuator_limit}"
            )
        if self.update_dt is not None and self.update_dt <= 0:
            raise ConfigurationError(
                f"update_dt must be positive, got {self.update_dt}"
            )


@dataclass
class ClosedLoopRecord:
    """Everything a closed-loop run produces.

    counts is the full-rate binned photon record; quadratures the
    reference-locked demodulation of that record; trap_freq_series and
    error_signal are sampled every rec_dt (actuation updates, decimated
    when a run would otherwise record more than ~2e6 points - metadata
    carries the stride).
    """

    counts: CountSeries
    quadratures: QuadratureRecord | None
    trap_freq_series: np.ndarray
    error_signal: np.ndarray
    rec_dt: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trap_freq_series) != len(self.error_signal):
            raise ConfigurationError(
                "trap_freq_series and error_signal must share a time base"
            )

    def control_times(self) -> np.ndarray:
        return self.counts.start_time + self.rec_dt * (
            np.arange(len(self.trap_freq_series)) + 1.0
        )


def phase_detector(counts: CountSeries, ref: ReferenceSignal,
                   det: DetectionParams) -> np.ndarray:
    """Raw (unfiltered) mixer output in meters, one value per count bin.

    (rate/I0 - 1) * 2/(V q) * sin(theta_ref) evaluated at bin centers: for
    an oscillation a*cos(theta_ref - delta) its low-pass content is
    a*sin(delta), zero at lock, extremal and positive at delta = +pi/2.
    """
    if ref.frequency >= 0.5 * counts.fs:
        raise ConfigurationError(
            f"reference at {ref.frequency} Hz is above the count-stream "
            f"Nyquist {0.5 * counts.fs} Hz"
        )
    slope = det.visibility * det.fringe_wavevector
    if det.i0 <= 0 or slope <= 0:
        raise ConfigurationError("phase detection needs i0 > 0 and V*q > 0")
    rate = counts.counts.astype(np.float64) / (det.i0 * counts.bin_dt)
    return (rate - 1.0) * (2.0 / slope) * np.sin(ref.phase(counts.times()))


def _loop_cfg_tuple(ion: IonParams, det: DetectionParams, loop: LoopConfig,
                    dt: float, bin_dt: float, update_dt: float,
                    steps_per_bin: int, bins_per_update: int,
                    rec_stride: int) -> tuple:
    from .constants import KB

    transduction = 0 if det.transduction == "sine" else 1
    loop_alpha = 1.0 - math.exp(-2 * math.pi * loop.loop_cutoff * bin_dt)
    return (
        ion.mass, ion.gamma, KB * ion.temperature, dt, ion.omega0,
        det.i0, det.visibility, det.fringe_wavevector, det.fringe_phase,
        transduction, math.sin(det.fringe_phase), math.cos(det.fringe_phase),
        1.0 / (det.i0 * bin_dt), 2.0 / (det.visibility * det.fringe_wavevector),
        loop_alpha, loop.loop_order, loop.gain, loop.integral_gain,
        loop.actuator_limit, update_dt, steps_per_bin, bins_per_update,
        rec_stride,
    )


def run_closed_loop(ion: IonParams, det: DetectionParams, loop: LoopConfig,
                    duration: float, dt: float = DEFAULT_DT, seed=0, *,
                    bin_dt: float = DEFAULT_LOOP_BIN_DT,
                    quadrature_filter: tuple = (4, 20.0),
                    quadrature_fs: float = 2500.0,
                    initial_state: OscillatorState | None = None,
                    record_quadratures: bool = True) -> ClosedLoopRecord:
    """Run the trap-frequency PLL and record its full signal chain.

    Strictly sequential per count bin: the oscillator advances steps_per_bin
    propagator steps at the current omega_trap, Poisson counts are drawn
    from the accumulated fringe rate, the mixer error is low-pass filtered,
    and every update_dt the actuation omega_trap = omega0 + clamp(gain *
    error + integral, +-actuator_limit) is refreshed. Deterministic per
    seed, bit-identical across backends.

    The quadratures are the lock-in of the count record against the loop
    reference (phase-law aware, so fm references demodulate coherently),
    scaled to meters with the analytic fringe slope. Saturation of more
    than 50% of the updates within any one-second stretch marks the record
    with a lock-failure warning in metadata.
    """
    if duration <= 0:
        raise ConfigurationError(f"duration must be positive, got {duration}")
    steps_per_bin = int(round(bin_dt / dt))
    if steps_per_bin < 1 or abs(bin_dt - steps_per_bin * dt) > 1e-9 * bin_dt:
        raise ConfigurationError(
            f"bin_dt ({bin_dt}) must be an integer multiple of dt ({dt})"
        )
    update_dt = loop.update_dt if loop.update_dt is not None else bin_dt
    bins_per_update = int(round(update_dt / bin_dt))
    if bins_per_update < 1 or abs(update_dt - bins_per_update * bin_dt) > 1e-9 * update_dt:
        raise ConfigurationError(
            f"update_dt ({update_dt}) must be an integer multiple of "
            f"bin_dt ({bin_dt})"
        )
    omega_max = ion.omega0 + loop.actuator_limit
    if dt > max_step(omega_max):
        raise ConfigurationError(
            f"dt {dt} s undersamples the highest reachable trap frequency; "
            f"need dt <= {max_step(omega_max):.3e} s"
        )
    if loop.reference.frequency >= 0.5 / bin_dt:
        raise ConfigurationError(
            f"reference frequency {loop.reference.frequency} Hz is above "
            f"the count-bin Nyquist {0.5 / bin_dt} Hz"
        )
    lam_max = det.i0 * (1.0 + det.visibility) * bin_dt
    if lam_max >= 30.0:
        raise ConfigurationError(
            f"mean counts per bin up to {lam_max:.1f} would overflow the "
            "uint8 count path; use a shorter bin_dt"
        )

    n_bins = int(round(duration / bin_dt))
    n_bins = (n_bins // bins_per_update) * bins_per_update
    if n_bins == 0:
        raise ConfigurationError("duration shorter than one update interval")
    n_updates = n_bins // bins_per_update
    rec_stride = max(1, -(-n_updates // _MAX_RECORDED_UPDATES))
    cfg = _loop_cfg_tuple(ion, det, loop, dt, bin_dt, update_dt,
                          steps_per_bin, bins_per_update, rec_stride)

    rng = np.random.Generator(np.random.PCG64(seed))
    if initial_state is None:
        initial_state = thermal_state(ion, rng)
    state = (initial_state.x, initial_state.p, ion.omega0, 0.0,
             np.zeros(_MAX_LOOP_ORDER), 0, 0)

    counts = np.empty(n_bins, dtype=np.uint8)
    omega_rec = np.empty(-(-n_updates // rec_stride))
    err_rec = np.empty_like(omega_rec)

    bins_chunk = max(bins_per_update, ((1 << 16) // bins_per_update) * bins_per_update)
    rec_buf_len = bins_chunk // bins_per_update + 1
    rec_o = np.empty(rec_buf_len)
    rec_e = np.empty(rec_buf_len)
    updates_per_second = max(1, int(round(1.0 / update_dt)))
    sat_window = 0
    sat_duty_max = 0.0
    window_updates = 0
    n_sat_total = 0
    pos_rec = 0
    ib0 = 0
    while ib0 < n_bins:
        nb = min(bins_chunk, n_bins - ib0)
        normals = rng.standard_normal((nb * steps_per_bin, 2))
        uniforms = rng.random(nb)
        t_centers = bin_dt * (np.arange(ib0, ib0 + nb) + 0.5)
        ref_sin = np.sin(loop.reference.phase(t_centers))
        state, n_rec, n_sat = kernels.closed_loop_chunk(
            cfg, state, normals, ref_sin, uniforms,
            counts[ib0:ib0 + nb], rec_o, rec_e,
        )
        omega_rec[pos_rec:pos_rec + n_rec] = rec_o[:n_rec]
        err_rec[pos_rec:pos_rec + n_rec] = rec_e[:n_rec]
        pos_rec += n_rec
        n_sat_total += n_sat
        # coarse 1 s saturation duty: chunks are << 1 s, so accumulate
        sat_window += n_sat
        window_updates += nb // bins_per_update
        if window_updates >= updates_per_second:
            sat_duty_max = max(sat_duty_max, sat_window / window_updates)
            sat_window = 0
            window_updates = 0
        ib0 += nb
    if window_updates:
        sat_duty_max = max(sat_duty_max, sat_window / window_updates)

    lock_warning = sat_duty_max > 0.5
    if lock_warning:
        warnings.warn(
            f"actuator saturated for {sat_duty_max:.0%} of updates within a "
            "one-second window; the loop is likely out of lock",
            stacklevel=2,
        )

    series = CountSeries(bin_dt=bin_dt, counts=counts)
    quad = None
    if record_quadratures:
        quad = lockin(
            series, f_lo=loop.reference.frequency,
            lo_phase=loop.reference.phase0, filter=quadrature_filter,
            out_fs=quadrature_fs, scale=displacement_psd_scale(det),
            phase_fn=loop.reference.phase,
        )
    metadata = {
        "seed": seed,
        "backend": kernels.BACKEND,
        "dt": dt,
        "bin_dt": bin_dt,
        "update_dt": update_dt,
        "duration": n_bins * bin_dt,
        "rec_stride": rec_stride,
        "f_lo": loop.reference.frequency,
        "reference_kind": loop.reference.kind,
        "mod_frequency": loop.reference.mod_frequency,
        "mod_index": loop.reference.mod_index,
        "gain": loop.gain,
        "loop_cutoff": loop.loop_cutoff,
        "loop_order": loop.loop_order,
        "integral_gain": loop.integral_gain,
        "actuator_limit": loop.actuator_limit,
        "n_saturated_updates": int(n_sat_total),
        "saturation_duty_max": float(sat_duty_max),
        "lock_warning": bool(lock_warning),
    }
    return ClosedLoopRecord(counts=series, quadratures=quad,
                            trap_freq_series=omega_rec[:pos_rec],
                            error_signal=err_rec[:pos_rec],
                            rec_dt=update_dt * rec_stride, metadata=metadata)


# ---------------------------------------------------------------------------
# closed-loop spectral diagnostics
# ---------------------------------------------------------------------------

def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return values
    kernel = np.full(width, 1.0 / width)
    return np.convolve(values, kernel, mode="same")


def _matched_psds(record_on: ClosedLoopRecord, record_off: ClosedLoopRecord,
                  segment_len: int | None):
    on, off = record_on.counts, record_off.counts
    if abs(on.duration - off.duration) > on.bin_dt or on.bin_dt != off.bin_dt:
        raise ConfigurationError(
            "records must share duration and bin width for a matched "
            "spectral comparison"
        )
    if segment_len is None:
        segment_len = min(len(on), 1 << 21)
    return (welch_psd(on, segment_len=segment_len),
            welch_psd(off, segment_len=segment_len))


def phase_noise_suppression_band(record_on: ClosedLoopRecord,
                                 record_off: ClosedLoopRecord,
                                 segment_len: int | None = None,
                                 smooth_bins: int = 15) -> float:
    """Contiguous bandwidth around f_LO where the locked spectrum sits
    below the free-running one.

    Both count records are Welch-estimated on the same grid, smoothed by
    smooth_bins, and compared bin-by-bin walking outward from the carrier;
    the RBW-limited central peak (+- 3 RBW plus the smoothing width) is
    excluded from the comparison. Returns the summed width of the two
    suppressed stretches; 0.0 for records that are nowhere suppressed.
    """
    psd_on, psd_off = _matched_psds(record_on, record_off, segment_len)
    f_lo = record_on.metadata.get("f_lo")
    if f_lo is None:
        raise ConfigurationError("record metadata lacks the reference frequency")

    # require a resolvable motional band in the free-running record
    floor_off = float(np.median(psd_off.values[1:]))
    band = np.abs(psd_off.freqs - f_lo) < 50 * psd_off.rbw
    if not np.any(band) or float(np.max(psd_off.values[band])) < 3 * floor_off:
        raise AnalysisError(
            "free-running record shows no resolvable motional band near "
            f"{f_lo} Hz"
        )

    v_on = _smooth(psd_on.values, smooth_bins)
    v_off = _smooth(psd_off.values, smooth_bins)
    df = psd_on.df
    i_lo = int(np.argmin(np.abs(psd_on.freqs - f_lo)))
    half_excl = int(math.ceil((3 * psd_on.rbw) / df)) + smooth_bins // 2 + 1

    width = 0.0
    i = i_lo + half_excl
    while i < len(v_on) and v_on[i] < v_off[i]:
        width += df
        i += 1
    i = i_lo - half_excl
    while i > 0 and v_on[i] < v_off[i]:
        width += df
        i -= 1
    return width


def motional_band_power(psd: PsdEstimate, f_center: float, half_width: float,
                        floor: float | None = None) -> float:
    """Shot-floor-subtracted power integrated over f_center +- half_width.

    With floor=None the flat background is estimated as the median density
    in an annulus from 1x to 3x half_width outside the band.
    """
    d = np.abs(psd.freqs - f_center)
    band = d <= half_width
    if not np.any(band):
        raise AnalysisError("band outside the PSD grid")
    if floor is None:
        ann = (d > half_width) & (d <= 3 * half_width)
        if not np.any(ann):
            raise AnalysisError("no annulus bins available to estimate the floor")
        floor = float(np.median(psd.values[ann]))
    return float(np.sum(psd.values[band] - floor) * psd.df)


def central_peak_fraction(psd_on: PsdEstimate, f_lo: float,
                          band_half_width: float, peak_rbw_mult: float = 3.0) -> float:
    """Energy fraction of the RBW-limited carrier peak within the motional band.

    Both the peak (f_LO +- peak_rbw_mult * RBW) and the full band power are
    background-subtracted with the same annulus floor.
    """
    d = np.abs(psd_on.freqs - f_lo)
    ann = (d > band_half_width) & (d <= 3 * band_half_width)
    if not np.any(ann):
        raise AnalysisError("no annulus bins available to estimate the floor")
    floor = float(np.median(psd_on.values[ann]))
    total = motional_band_power(psd_on, f_lo, band_half_width, floor=floor)
    peak = motional_band_power(psd_on, f_lo, peak_rbw_mult * psd_on.rbw,
                               floor=floor)
    if total <= 0:
        raise AnalysisError("no band power above the floor")
    return peak / total
