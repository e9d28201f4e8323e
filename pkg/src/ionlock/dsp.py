"""Spectral estimation, demodulation, fitting and calibration.

Everything here consumes either raw arrays or the CountSeries /
PsdEstimate currency and is streaming-friendly: Welch segments, lock-in
mixing and the correlation-spectrum heterodyne all walk the record in
chunks, so 1e8-bin inputs run in constant memory.

Spectral conventions (used consistently across the package):

* PSDs are one-sided in ordinary frequency f (Hz).
* Parseval: the integral of the density over f equals the time-domain
  variance; a coherent tone of amplitude A integrates to A^2/2.
* Under these conventions a Poisson stream of rate I0 has a flat rate
  density of 2*I0 (Schottky).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps
from scipy import special

from .detection import CountSeries, DetectionParams
from .errors import (
    AnalysisError,
    CalibrationError,
    ConfigurationError,
    FitError,
)

DEFAULT_QUADRATURE_FS = 1.0 / 0.4e-3  # 2.5 kHz output grid of the lock-in

_CHUNK = 1 << 22


# ---------------------------------------------------------------------------
# result containers
# ---------------------------------------------------------------------------

@dataclass
class PsdEstimate:
    """One-sided power spectral density estimate."""

    freqs: np.ndarray
    values: np.ndarray
    rbw: float
    units: str = "counts^2/s^2/Hz"
    n_averages: int = 1

    def __post_init__(self):
        if self.rbw <= 0:
            raise ConfigurationError("rbw must be positive")

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if len(self.freqs) > 1 else self.rbw

    def band_power(self, f_lo: float, f_hi: float, floor: float = 0.0) -> float:
        """Integrated (density - floor) over [f_lo, f_hi]."""
        m = (self.freqs >= f_lo) & (self.freqs <= f_hi)
        return float(np.sum(self.values[m] - floor) * self.df)


@dataclass
class LorentzianFit:
    """floor + area * (fwhm/2pi) / ((f - f0)^2 + (fwhm/2)^2)."""

    f0: float
    fwhm: float
    area: float
    floor: float
    covariance: np.ndarray

    def value(self, f):
        f = np.asarray(f, dtype=float)
        hw = 0.5 * self.fwhm
        return self.floor + self.area * (self.fwhm / (2 * math.pi)) / (
            (f - self.f0) ** 2 + hw * hw
        )

    def uncertainties(self):
        """1-sigma parameter uncertainties (f0, fwhm, area, floor)."""
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def report(self) -> str:
        s = self.uncertainties()
        lines = [
            "lorentzian fit",
            f"  f0    = {self.f0:.6f} Hz +- {s[0]:.3g}",
            f"  fwhm  = {self.fwhm:.6f} Hz +- {s[1]:.3g}",
            f"  area  = {self.area:.6e} +- {s[2]:.3g}",
            f"  floor = {self.floor:.6e} +- {s[3]:.3g}",
        ]
        return "\n".join(lines)


@dataclass
class QuadratureRecord:
    """Demodulated in-phase/quadrature trajectories.

    x1 + i*x2 rotates with the oscillation relative to the local
    oscillator: a coherent displacement a*cos(2 pi f_lo t - delta) gives
    (x1, x2) -> (a cos delta, a sin delta). units is "m" when a
    displacement calibration was applied, otherwise the raw mixer units.
    """

    fs: float = DEFAULT_QUADRATURE_FS
    x1: np.ndarray = field(default_factory=lambda: np.empty(0))
    x2: np.ndarray = field(default_factory=lambda: np.empty(0))
    filter_spec: tuple = (4, 30.0)
    start_time: float = 0.0
    units: str = "m"

    def __post_init__(self):
        if len(self.x1) != len(self.x2):
            raise ConfigurationError("x1 and x2 must have equal length")
        order, cutoff = self.filter_spec
        if not self.fs > 2 * cutoff:
            raise ConfigurationError(
                f"quadrature rate {self.fs} Hz must exceed twice the "
                f"filter cutoff {cutoff} Hz"
            )

    def __len__(self):
        return len(self.x1)

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self.x1)) / self.fs

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.x1, self.x2)

    def phase(self) -> np.ndarray:
        return np.arctan2(self.x2, self.x1)


@dataclass
class CalibrationResult:
    """Displacement calibration inferred from a driven run.

    scale converts raw rate-PSD densities to m^2/Hz; drive_to_amplitude
    converts drive units to meters of coherent motion amplitude; residual
    is the relative rms misfit of the contrast model.
    """

    scale: float
    drive_to_amplitude: float
    residual: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigurationError("calibration scale must be positive")


# ---------------------------------------------------------------------------
# Welch estimation
# ---------------------------------------------------------------------------

def _window(name: str, n: int) -> np.ndarray:
    if name == "hann":
        # periodic hann: ENBW is exactly 1.5 bins
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    if name == "rect":
        return np.ones(n)
    raise ConfigurationError(f"unknown window {name!r}")


def welch_array(x, fs: float, segment_len: int, window: str = "hann",
                overlap: float = 0.5, units: str = "arb^2/Hz") -> PsdEstimate:
    """Averaged-periodogram PSD of a real-valued uniformly sampled array.

    Segments are demeaned individually; scaling is the standard one-sided
    density normalization 2/(fs * sum(w^2)). The reported rbw is the
    noise-equivalent width of the window (fs/N for rect, 1.5 fs/N for
    hann). Accepts any array-like (including integer count arrays, which
    are promoted per segment, keeping memory flat).
    """
    n = len(x)
    if segment_len > n:
        raise AnalysisError(
            f"series of {n} samples is shorter than one segment ({segment_len})"
        )
    if not 0.0 <= overlap <= 0.9:
        raise ConfigurationError(f"overlap must be in [0, 0.9], got {overlap}")
    if segment_len < 2:
        raise ConfigurationError("segment_len must be >= 2")
    w = _window(window, segment_len)
    wsum2 = float(np.sum(w * w))
    step = max(1, int(round(segment_len * (1.0 - overlap))))
    acc = np.zeros(segment_len // 2 + 1)
    k = 0
    for start in range(0, n - segment_len + 1, step):
        seg = np.asarray(x[start:start + segment_len], dtype=np.float64)
        seg = seg - seg.mean()
        if window != "rect":
            seg *= w
        spec = np.fft.rfft(seg)
        acc += spec.real**2 + spec.imag**2
        k += 1
    values = acc * (2.0 / (fs * wsum2 * k))
    values[0] *= 0.5
    if segment_len % 2 == 0:
        values[-1] *= 0.5
    freqs = np.fft.rfftfreq(segment_len, 1.0 / fs)
    enbw = fs / segment_len * (1.5 if window == "hann" else 1.0)
    return PsdEstimate(freqs=freqs, values=values, rbw=enbw,
                       units=units, n_averages=k)


def welch_psd(series: CountSeries, segment_len: int, window: str = "hann",
              overlap: float = 0.5) -> PsdEstimate:
    """One-sided PSD of the count *rate* signal of a binned photon stream.

    Wraps welch_array on counts/bin_dt; see module docstring for the
    conventions (white Poisson floor = 2*I0 in rate units).
    """
    est = welch_array(series.counts, fs=series.fs, segment_len=segment_len,
                      window=window, overlap=overlap)
    est.values *= (1.0 / series.bin_dt) ** 2
    est.units = "counts^2/s^2/Hz"
    return est


def apply_calibration(psd: PsdEstimate, scale) -> PsdEstimate:
    """Return a displacement-calibrated copy of a rate-unit PSD."""
    s = scale.scale if isinstance(scale, CalibrationResult) else float(scale)
    if s <= 0:
        raise ConfigurationError("calibration scale must be positive")
    return PsdEstimate(freqs=psd.freqs.copy(), values=psd.values * s,
                       rbw=psd.rbw, units="m^2/Hz", n_averages=psd.n_averages)


# ---------------------------------------------------------------------------
# filters and lock-in
# ---------------------------------------------------------------------------

def cascade_pole_frequency(order: int, cutoff: float) -> float:
    """Per-section pole frequency of n identical one-pole lowpass sections
    whose cascade is -3 dB at `cutoff`."""
    return cutoff / math.sqrt(2.0 ** (1.0 / order) - 1.0)


def _lowpass_sos(order: int, cutoff: float, fs: float, design: str) -> np.ndarray:
    if order < 1:
        raise ConfigurationError("filter order must be >= 1")
    if cutoff <= 0 or cutoff >= fs / 2:
        raise ConfigurationError(
            f"cutoff {cutoff} Hz must lie in (0, fs/2 = {fs / 2} Hz)"
        )
    if design == "butter":
        return sps.butter(order, cutoff, fs=fs, output="sos")
    if design == "cascade":
        f_pole = cascade_pole_frequency(order, cutoff)
        a = math.exp(-2 * math.pi * f_pole / fs)
        row = [1.0 - a, 0.0, 0.0, 1.0, -a, 0.0]
        return np.array([row] * order)
    raise ConfigurationError(f"unknown filter design {design!r}")


def lowpass(series, order: int, cutoff: float, fs: float | None = None,
            design: str = "cascade"):
    """Low-pass filter a series; DC gain exactly 1.

    design="cascade" (default) is `order` identical matched-z one-pole
    sections with cumulative -3 dB at `cutoff`; design="butter" is a
    Butterworth of the same order, which rolls off much faster above
    cutoff (e.g. 80 dB vs 52 dB at 10x cutoff for order 4). A CountSeries
    input is filtered as its rate signal and fs is taken from it.
    """
    if isinstance(series, CountSeries):
        if fs is None:
            fs = series.fs
        data = series.counts.astype(np.float64) / series.bin_dt
    else:
        if fs is None:
            raise ConfigurationError("fs is required for plain-array input")
        data = np.asarray(series, dtype=np.float64)
    sos = _lowpass_sos(order, cutoff, fs, design)
    return sps.sosfilt(sos, data)


def _largest_predecimation(dec_total: int, fs: float, f_pole: float,
                           out_fs: float) -> int:
    fs1_min = max(40.0 * f_pole, 4.0 * out_fs)
    best = 1
    for r in range(1, dec_total + 1):
        if dec_total % r == 0 and fs / r >= fs1_min:
            best = r
    return best


def lockin(series: CountSeries, f_lo: float, lo_phase: float = 0.0,
           filter: tuple = (4, 30.0), out_fs: float = DEFAULT_QUADRATURE_FS,
           scale=None, design: str = "cascade", phase_fn=None) -> QuadratureRecord:
    """Dual-mixer demodulation of a count stream at the LO frequency.

    X1 = LP[2 * rate * cos(theta_lo)], X2 = LP[2 * rate * sin(theta_lo)],
    with theta_lo = 2 pi f_lo t + lo_phase evaluated at bin centers
    (phase_fn overrides the linear phase law, e.g. for an FM reference).
    The mean rate is subtracted before mixing. The mixed signals are
    boxcar-predecimated to an intermediate rate that keeps the filter
    passband unaliased, run through the low-pass cascade, and subsampled
    onto the out_fs grid.

    For a coherent displacement a*cos(theta_lo - delta) the steady-state
    output satisfies hypot(x1, x2) = a for any delta. scale (a
    CalibrationResult or an m^2-per-raw-unit factor) converts the mixer
    outputs to meters; without it the record is flagged units="counts/s".
    """
    order, cutoff = filter
    fs = series.fs
    if not f_lo < fs / 2:
        raise ConfigurationError(f"f_lo {f_lo} Hz must be below Nyquist {fs / 2} Hz")
    if out_fs < 2 * cutoff:
        raise ConfigurationError("out_fs must be at least twice the filter cutoff")
    dec_total = fs / out_fs
    r_tot = int(round(dec_total))
    if abs(dec_total - r_tot) > 1e-9 * r_tot or r_tot < 1:
        raise ConfigurationError(
            f"fs/out_fs = {dec_total} must be a positive integer"
        )
    f_pole = (cascade_pole_frequency(order, cutoff)
              if design == "cascade" else cutoff)
    r1 = _largest_predecimation(r_tot, fs, f_pole, out_fs)
    r2 = r_tot // r1
    fs1 = fs / r1

    n_use = (len(series) // r_tot) * r_tot
    counts = series.counts
    mean_rate = float(np.sum(counts[:n_use], dtype=np.float64)) / (n_use or 1)

    two_pi_flo = 2 * math.pi * f_lo
    xi_parts = []
    xq_parts = []
    chunk = (_CHUNK // r1) * r1
    for start in range(0, n_use, chunk):
        stop = min(start + chunk, n_use)
        c = counts[start:stop].astype(np.float64)
        c -= mean_rate
        t = series.start_time + series.bin_dt * (np.arange(start, stop) + 0.5)
        theta = phase_fn(t) if phase_fn is not None else two_pi_flo * t + lo_phase
        ct = np.cos(theta)
        st = np.sin(theta)
        ct *= c
        st *= c
        xi_parts.append(ct.reshape(-1, r1).mean(axis=1))
        xq_parts.append(st.reshape(-1, r1).mean(axis=1))
    xi = 2.0 * np.concatenate(xi_parts) / series.bin_dt if xi_parts else np.empty(0)
    xq = 2.0 * np.concatenate(xq_parts) / series.bin_dt if xq_parts else np.empty(0)

    sos = _lowpass_sos(order, cutoff, fs1, design)
    x1 = sps.sosfilt(sos, xi)[r2 - 1::r2]
    x2 = sps.sosfilt(sos, xq)[r2 - 1::r2]

    units = "counts/s"
    if scale is not None:
        s = scale.scale if isinstance(scale, CalibrationResult) else float(scale)
        amp = math.sqrt(s)
        x1 = x1 * amp
        x2 = x2 * amp
        units = "m"
    return QuadratureRecord(fs=out_fs, x1=x1, x2=x2, filter_spec=(order, cutoff),
                            start_time=series.start_time, units=units)


def settle_time(filter_spec: tuple, design: str = "cascade") -> float:
    """Time for the lock-in filter transient to decay (~8 time constants)."""
    order, cutoff = filter_spec
    f_pole = cascade_pole_frequency(order, cutoff) if design == "cascade" else cutoff
    return 8.0 * order / (2 * math.pi * f_pole)


# ---------------------------------------------------------------------------
# Lorentzian fit
# ---------------------------------------------------------------------------

def _lorentz_model(f, f0, fwhm, area, floor):
    hw = 0.5 * fwhm
    return floor + area * (fwhm / (2 * math.pi)) / ((f - f0) ** 2 + hw * hw)


def lorentzian_fit(psd: PsdEstimate, init=None, f_window: tuple | None = None,
                   exclude=()) -> LorentzianFit:
    """Weighted least-squares fit of floor + Lorentzian to a PSD.

    Parameters
    ----------
    psd : PsdEstimate
    init : optional (f0, fwhm, area, floor) initial guess; defaults come
        from peak-location heuristics.
    f_window : optional (f_lo, f_hi) restricting the fitted band.
    exclude : iterable of (f_lo, f_hi) bands masked out of the fit (e.g. a
        calibration tone).

    Bin weights are the chi-squared standard errors values/sqrt(n_averages);
    the covariance is the Gauss-Newton estimate in the whitened basis. The
    area parameter is the full analytic integral of the fitted line.
    """
    f = psd.freqs
    y = psd.values
    mask = np.ones(len(f), dtype=bool)
    mask[0] = False  # DC bin carries no density after demeaning
    if f_window is not None:
        mask &= (f >= f_window[0]) & (f <= f_window[1])
    for lo, hi in exclude:
        mask &= ~((f >= lo) & (f <= hi))
    f = f[mask]
    y = y[mask]
    if len(f) < 10:
        raise FitError(f"only {len(f)} usable bins; need at least 10")

    if init is None:
        floor0 = float(np.median(y))
        i_pk = int(np.argmax(y))
        peak = y[i_pk] - floor0
        if peak <= 0 or y[i_pk] < 3.0 * floor0:
            raise FitError("no resonance line above the floor to fit")
        f00 = float(f[i_pk])
        above = y > floor0 + 0.5 * peak
        fwhm0 = max(float(np.sum(above)) * psd.df, psd.df)
        area0 = peak * (math.pi / 2) * fwhm0
    else:
        f00, fwhm0, area0, floor0 = (float(v) for v in init)
        peak = area0 * 2.0 / (math.pi * fwhm0)

    sigma = np.maximum(y, 1e-300) / math.sqrt(max(psd.n_averages, 1))
    w = 1.0 / sigma

    # The physical parameters span ~24 decades (f0 in Hz vs a displacement
    # density in m^2/Hz), which defeats the optimizer's trust region.
    # Fit in unit-scaled variables p = physical / s instead.
    y_scale = max(peak + floor0, 1e-300)
    s = np.array([f00, fwhm0, max(area0, fwhm0 * y_scale), y_scale])

    def residual(p):
        return (_lorentz_model(f, *(p * s)) - y) * w

    def jac(p):
        f0, fwhm, area, _fl = p * s
        hw = 0.5 * fwhm
        d = (f - f0) ** 2 + hw * hw
        col_f0 = area * (fwhm / (2 * math.pi)) * 2 * (f - f0) / d**2
        col_w = area / (2 * math.pi) * (d - 0.5 * fwhm**2) / d**2
        col_a = (fwhm / (2 * math.pi)) / d
        col_fl = np.ones_like(f)
        return np.column_stack([col_f0 * w, col_w * w, col_a * w, col_fl * w]) * s

    from scipy.optimize import least_squares

    p0 = np.array([f00, fwhm0, area0, max(floor0, 1e-3 * y_scale)]) / s
    lo_b = np.array([f.min(), psd.df * 0.1, 0.0, 0.0]) / s
    hi_b = np.array([f.max(), f.max() - f.min(), np.inf, np.inf]) / s
    res = least_squares(residual, p0, jac=jac, bounds=(lo_b, hi_b),
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=400)
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitError(f"fit did not converge: {res.message}")
    J = res.jac
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(J.T @ J)
    cov = cov * np.outer(s, s)
    f0_fit, fwhm_fit, area_fit, floor_fit = (float(v) for v in res.x * s)
    if area_fit > 0 and peak > 0:
        # degenerate-line guard: an area consistent with zero is not a line
        s_area = math.sqrt(max(cov[2, 2], 0.0))
        if init is None and area_fit < 2.0 * s_area:
            raise FitError("fitted line area is consistent with zero")
    return LorentzianFit(f0=f0_fit, fwhm=fwhm_fit, area=area_fit,
                         floor=floor_fit, covariance=cov)


def enbw_lorentzian(fwhm: float) -> float:
    """Noise-equivalent bandwidth (pi/2) * fwhm of a Lorentzian line."""
    if fwhm <= 0:
        raise ConfigurationError("fwhm must be positive")
    return 0.5 * math.pi * fwhm


def resolution_metric(floor: float, bandwidth: float, ion) -> tuple:
    """Smallest resolvable displacement over a bandwidth, and its ratio to
    the zero-point spread: (sqrt(floor*bandwidth), ratio_to_sql)."""
    from .oscillator import sql_displacement

    if floor < 0 or bandwidth <= 0:
        raise ConfigurationError("floor must be >= 0 and bandwidth > 0")
    res = math.sqrt(floor * bandwidth)
    return res, res / sql_displacement(ion.mass, ion.omega0)


# ---------------------------------------------------------------------------
# displacement calibration
# ---------------------------------------------------------------------------

def tone_power(psd: PsdEstimate, f_tone: float, width: float | None = None) -> float:
    """Integrated excess power of a narrow tone above its local background.

    The background is the median density in an annulus around the tone
    window; returns the (density - background) integral over the window.
    """
    if width is None:
        width = max(4.0 * psd.rbw, 10.0 * psd.df)
    m_in = np.abs(psd.freqs - f_tone) <= width
    m_bg = (np.abs(psd.freqs - f_tone) > width) & (np.abs(psd.freqs - f_tone) <= 4 * width)
    if not np.any(m_in) or not np.any(m_bg):
        raise AnalysisError(f"tone at {f_tone} Hz not resolved in the PSD grid")
    bg = float(np.median(psd.values[m_bg]))
    return float(np.sum(psd.values[m_in] - bg) * psd.df)


def calibrate_displacement(psd_with_drive: PsdEstimate, contrast_measurements,
                           det: DetectionParams, drive_amplitude: float | None = None,
                           drive_frequency: float | None = None) -> CalibrationResult:
    """Absolute displacement calibration from fringe-contrast reduction.

    contrast_measurements is a sequence of (drive_amplitude, fringe_contrast)
    pairs measured at the fringe top under coherent excitation. Time-averaged
    over the drive period, the contrast follows C0 * J0(q * s * u) with
    q = 2 k cos(theta), u the drive amplitude and s the meters-per-drive-unit
    factor; C0 absorbs the static thermal blur and is left free. The fitted s
    converts the drive setting of psd_with_drive (drive_amplitude, default:
    the largest measured setting) into a known motion amplitude a, and the
    PSD is scaled so the tone at drive_frequency integrates to a^2/2.
    """
    meas = np.asarray(
        [(float(u), float(c)) for u, c in contrast_measurements], dtype=float
    )
    if len(meas) < 3:
        raise CalibrationError("need at least 3 contrast measurements")
    u = meas[:, 0]
    c = meas[:, 1]
    u_pos = u[u > 0]
    if len(u_pos) < 2 or u_pos.max() < 2.0 * u_pos.min():
        raise CalibrationError(
            "contrast measurements must span at least a 2x amplitude range"
        )
    q = det.fringe_wavevector

    # initial s: the setting where contrast first crosses C0*J0(1) = 0.7652
    # (clip into the fit bounds: noise can push the top point above 1)
    c0_init = min(float(np.max(c)), 1.0)
    target = 0.7652 * c0_init
    below = np.nonzero((c < target) & (u > 0))[0]
    s0 = (1.0 / (q * u[below[0]])) if len(below) else 0.5 / (q * u_pos.max())

    from scipy.optimize import least_squares

    def model(p):
        c0, s = p
        return c0 * special.j0(q * s * u)

    def residual(p):
        return model(p) - c

    res = least_squares(residual, np.array([c0_init, s0]),
                        bounds=([0.0, 0.0], [1.0, np.inf]), xtol=1e-12, ftol=1e-12)
    c0_fit, s_fit = res.x
    rms = math.sqrt(float(np.mean((model(res.x) - c) ** 2)))
    residual_rel = rms / c0_fit if c0_fit > 0 else math.inf
    if not res.success or residual_rel > 0.10:
        raise CalibrationError(
            f"contrast model misfit {residual_rel:.1%} exceeds 10%"
        )

    if drive_amplitude is None:
        drive_amplitude = float(u_pos.max())
    a = s_fit * drive_amplitude
    if drive_frequency is None:
        raise CalibrationError("drive_frequency of the PSD tone is required")
    p_tone = tone_power(psd_with_drive, drive_frequency)
    if p_tone <= 0:
        raise CalibrationError("drive tone not found above background in PSD")
    scale = (0.5 * a * a) / p_tone
    return CalibrationResult(scale=scale, drive_to_amplitude=float(s_fit),
                             residual=float(residual_rel))


# ---------------------------------------------------------------------------
# correlation (g2) spectroscopy
# ---------------------------------------------------------------------------

def bin_timestamps(arrivals, bin_dt: float, duration: float | None = None,
                   start_time: float = 0.0) -> CountSeries:
    """Histogram photon arrival times into a CountSeries."""
    t = np.asarray(arrivals, dtype=float) - start_time
    if duration is None:
        duration = float(t.max()) if len(t) else 0.0
    n = int(math.ceil(duration / bin_dt)) if duration > 0 else 0
    counts = np.zeros(n, dtype=np.int64)
    if n:
        idx = (t / bin_dt).astype(np.int64)
        ok = (idx >= 0) & (idx < n)
        np.add.at(counts, idx[ok], 1)
    lam_max = counts.max() if n else 0
    return CountSeries(bin_dt=bin_dt,
                       counts=counts.astype(np.uint8 if lam_max < 256 else np.int64),
                       start_time=start_time)


def g2_spectrum(source, max_lag: float, rbw: float | None = None,
                center: float | None = None, span: float | None = None,
                bin_dt: float = 200e-9) -> PsdEstimate:
    """Spectrum of the count-stream intensity correlation.

    Equivalent to Fourier-transforming the count autocorrelation up to
    max_lag: the record is cut into max_lag-long segments whose
    periodograms are averaged, giving frequency resolution 1/max_lag.
    source is a CountSeries or an array of photon timestamps (binned at
    bin_dt first). Output is left in raw rate units.

    With center/span set, the stream is heterodyned to `center`, boxcar
    decimated to the requested span and analyzed at full resolution in
    that band only - constant memory for 1e8-bin records at mHz
    resolution. The stochastic floor is unaffected by the decimation
    (alias folding restores it exactly); coherent tones at offset df from
    the center are attenuated by sinc(df/span)^2, under 4% for
    |df| < span/10.
    """
    series = source if isinstance(source, CountSeries) else bin_timestamps(source, bin_dt)
    fs = series.fs
    n = len(series)
    duration = n * series.bin_dt
    if rbw is None:
        rbw = 1.0 / max_lag
    need = 1.0 / rbw
    if duration < need or max_lag < need * (1 - 1e-9) or max_lag > duration * (1 + 1e-9):
        raise AnalysisError(
            f"record of {duration:.3f} s cannot support rbw {rbw} Hz with "
            f"max_lag {max_lag} s; need duration >= max_lag >= {need:.3f} s"
        )

    counts = series.counts
    mean_counts = float(np.sum(counts, dtype=np.float64)) / n

    if center is None:
        nseg = int(round(max_lag * fs))
        est = welch_array(counts, fs=fs, segment_len=nseg, window="rect",
                          overlap=0.0)
        est.values *= (1.0 / series.bin_dt) ** 2
        est.units = "counts^2/s^2/Hz"
        est.rbw = 1.0 / max_lag
        return est

    if span is None:
        raise ConfigurationError("span is required when center is given")
    r = fs / span
    r_int = int(round(r))
    if abs(r - r_int) > 1e-9 * r_int or r_int < 1:
        raise ConfigurationError(
            f"fs/span = {r} must be a positive integer for the zoom mode"
        )
    if not (0 < center - span / 2 and center + span / 2 < fs / 2):
        raise ConfigurationError("zoom band must lie inside (0, fs/2)")

    n_dec = n // r_int
    n_use = n_dec * r_int
    z = np.empty(n_dec, dtype=np.complex128)
    chunk = (_CHUNK // r_int) * r_int
    pos = 0
    for start in range(0, n_use, chunk):
        stop = min(start + chunk, n_use)
        c = counts[start:stop].astype(np.float64)
        c -= mean_counts
        t = series.bin_dt * (np.arange(start, stop) + 0.5)
        mixed = c * np.exp(t * (-2j * math.pi * center))
        dec = mixed.reshape(-1, r_int).mean(axis=1)
        z[pos:pos + len(dec)] = dec
        pos += len(dec)

    dt_dec = r_int * series.bin_dt
    n_seg = int(round(max_lag / dt_dec))
    if n_seg < 2 or n_seg > n_dec:
        raise AnalysisError("max_lag incompatible with the zoom span")
    k = n_dec // n_seg
    acc = np.zeros(n_seg)
    for i in range(k):
        spec = np.fft.fft(z[i * n_seg:(i + 1) * n_seg])
        acc += spec.real**2 + spec.imag**2
    # one-sided-equivalent density in rate units at f = center + offset
    values = np.fft.fftshift(acc) * (2.0 * dt_dec / (n_seg * k)) / series.bin_dt**2
    offsets = np.fft.fftshift(np.fft.fftfreq(n_seg, dt_dec))
    return PsdEstimate(freqs=center + offsets, values=values, rbw=1.0 / max_lag,
                       units="counts^2/s^2/Hz", n_averages=k)


def line_width_bins(psd: PsdEstimate, f_peak: float | None = None,
                    window: float | None = None) -> int:
    """Width of a spectral line in bins at half its height above the floor.

    The floor is the median density in a window around the peak. Returns
    the number of contiguous bins (including the peak) above half maximum.
    """
    f = psd.freqs
    v = psd.values
    if window is not None and f_peak is not None:
        m = np.abs(f - f_peak) <= window
        f = f[m]
        v = v[m]
    if len(v) < 5:
        raise AnalysisError("too few bins around the line")
    i_pk = int(np.argmax(v))
    floor = float(np.median(v))
    half = floor + 0.5 * (v[i_pk] - floor)
    if v[i_pk] <= 3 * floor:
        raise AnalysisError("no line found above the floor")
    lo = i_pk
    while lo > 0 and v[lo - 1] > half:
        lo -= 1
    hi = i_pk
    while hi < len(v) - 1 and v[hi + 1] > half:
        hi += 1
    return hi - lo + 1
