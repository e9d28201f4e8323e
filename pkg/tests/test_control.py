"""Reference signals, phase detection, and the closed trap-frequency loop."""

import math

import numpy as np
import pytest

from ionlock import control
from ionlock.control import (
    ClosedLoopRecord,
    LoopConfig,
    ReferenceSignal,
    phase_detector,
    run_closed_loop,
)
from ionlock.detection import CountSeries, DetectionParams
from ionlock.dsp import PsdEstimate
from ionlock.errors import AnalysisError, ConfigurationError
from ionlock.oscillator import IonParams

TWO_PI = 2 * math.pi
F0 = IonParams().omega0 / TWO_PI


# ------------------------------------------------------------ reference ----

def test_reference_sine_phase_and_value():
    ref = ReferenceSignal.sine(1.0e6, phase0=0.25)
    t = np.array([0.0, 2.5e-7])
    assert np.allclose(ref.phase(t), [0.25, TWO_PI * 0.25 + 0.25])
    assert np.allclose(ref.value(t), np.cos(ref.phase(t)))
    assert control.reference_value(ref, 0.0) == pytest.approx(math.cos(0.25))


def test_reference_fm_phase():
    ref = ReferenceSignal.fm(1.0e6, f_mod=56.3, index=1.0)
    t = 1.0 / (4 * 56.3)  # quarter modulation period: sin term at maximum
    expect = TWO_PI * 1.0e6 * t + 1.0
    assert ref.phase(t) == pytest.approx(expect, rel=1e-12)
    # zero index degenerates to the plain sine law
    ref0 = ReferenceSignal.fm(1.0e6, f_mod=56.3, index=0.0)
    assert ref0.phase(t) == pytest.approx(TWO_PI * 1.0e6 * t, rel=1e-12)


def test_reference_validation():
    with pytest.raises(ConfigurationError):
        ReferenceSignal(kind="square", frequency=1e6)
    with pytest.raises(ConfigurationError):
        ReferenceSignal.sine(0.0)
    with pytest.raises(ConfigurationError):
        ReferenceSignal(kind="fm", frequency=1e6, mod_frequency=0.0)
    with pytest.raises(ConfigurationError):
        ReferenceSignal(kind="fm", frequency=1e6, mod_frequency=56.3,
                        mod_index=-1.0)


# ------------------------------------------------------- phase detector ----

def _mixer_counts(det, ref, a, delta, duration=0.01, fs=5e6):
    """Noiseless counts for x(t) = a*cos(theta_ref - delta), linear fringe."""
    n = int(round(duration * fs))
    t = (np.arange(n) + 0.5) / fs
    x = a * np.cos(ref.phase(t) - delta)
    rate = det.i0 * (1.0 + det.visibility * det.fringe_wavevector * x)
    return CountSeries(bin_dt=1 / fs, counts=rate / fs)


@pytest.mark.parametrize("delta,expected", [
    (math.pi / 2, 30e-9),   # quadrature lag: extremal positive error
    (0.0, 0.0),             # in phase: locked, zero error
    (-math.pi / 2, -30e-9),
])
def test_phase_detector_low_pass_content(delta, expected):
    det = DetectionParams(transduction="linear")
    ref = ReferenceSignal.sine(1.0e6)
    counts = _mixer_counts(det, ref, a=30e-9, delta=delta)
    err = phase_detector(counts, ref, det)
    assert np.mean(err) == pytest.approx(expected, abs=1e-13)


def test_phase_detector_small_angle_slope():
    det = DetectionParams(transduction="linear")
    ref = ReferenceSignal.sine(1.0e6)
    a = 20e-9
    for delta in (0.01, 0.1):
        counts = _mixer_counts(det, ref, a=a, delta=delta)
        err = np.mean(phase_detector(counts, ref, det))
        assert err == pytest.approx(a * math.sin(delta), rel=1e-9, abs=0)


def test_phase_detector_rejects_fast_reference():
    det = DetectionParams()
    counts = CountSeries(bin_dt=2e-7, counts=np.zeros(1000))
    with pytest.raises(ConfigurationError):
        phase_detector(counts, ReferenceSignal.sine(3.0e6), det)


# ----------------------------------------------------------- loop config ----

def test_loop_config_validation():
    ref = ReferenceSignal.sine(F0)
    LoopConfig(reference=ref, gain=0.0)  # zero gain is a legal open loop
    with pytest.raises(ConfigurationError):
        LoopConfig(reference=ref, loop_cutoff=0.0)
    with pytest.raises(ConfigurationError):
        LoopConfig(reference=ref, loop_order=0)
    with pytest.raises(ConfigurationError):
        LoopConfig(reference=ref, loop_order=9)
    with pytest.raises(ConfigurationError):
        LoopConfig(reference=ref, gain=math.inf)
    with pytest.raises(ConfigurationError):
        LoopConfig(reference=ref, integral_gain=math.nan)
    with pytest.raises(ConfigurationError):
        LoopConfig(reference=ref, actuator_limit=0.0)
    with pytest.raises(ConfigurationError):
        LoopConfig(reference=ref, update_dt=-1e-6)


def test_run_closed_loop_validation():
    ion = IonParams()
    det = DetectionParams()
    loop = LoopConfig(reference=ReferenceSignal.sine(F0))
    with pytest.raises(ConfigurationError):
        run_closed_loop(ion, det, loop, duration=0.0)
    with pytest.raises(ConfigurationError):  # bin_dt not a multiple of dt
        run_closed_loop(ion, det, loop, duration=0.01, dt=3e-8)
    with pytest.raises(ConfigurationError):  # dt undersamples the trap
        run_closed_loop(ion, det, loop, duration=0.01, dt=2e-7)
    with pytest.raises(ConfigurationError):  # update_dt not a bin multiple
        bad = LoopConfig(reference=ReferenceSignal.sine(F0), update_dt=3.3e-7)
        run_closed_loop(ion, det, bad, duration=0.01)
    with pytest.raises(ConfigurationError):  # reference above bin Nyquist
        fast = LoopConfig(reference=ReferenceSignal.sine(3.0e6))
        run_closed_loop(ion, det, fast, duration=0.01)
    with pytest.raises(ConfigurationError):  # uint8 count path overflow
        bright = DetectionParams(i0=2.0e8)
        run_closed_loop(ion, bright, loop, duration=0.01)
    with pytest.raises(ConfigurationError):  # shorter than one update
        run_closed_loop(ion, det, loop, duration=1e-7)


def test_closed_loop_record_validation():
    series = CountSeries(bin_dt=2e-7, counts=np.zeros(10, dtype=np.uint8))
    with pytest.raises(ConfigurationError):
        ClosedLoopRecord(counts=series, quadratures=None,
                         trap_freq_series=np.zeros(4),
                         error_signal=np.zeros(3), rec_dt=2e-7)
    rec = ClosedLoopRecord(counts=series, quadratures=None,
                           trap_freq_series=np.zeros(3),
                           error_signal=np.zeros(3), rec_dt=1e-3)
    assert np.allclose(rec.control_times(), [1e-3, 2e-3, 3e-3])


# ------------------------------------------------------------- execution ----

def test_closed_loop_determinism():
    ion = IonParams()
    det = DetectionParams()
    loop = LoopConfig(reference=ReferenceSignal.sine(F0))
    a = run_closed_loop(ion, det, loop, duration=0.05, seed=77,
                        record_quadratures=False)
    b = run_closed_loop(ion, det, loop, duration=0.05, seed=77,
                        record_quadratures=False)
    assert np.array_equal(a.counts.counts, b.counts.counts)
    assert np.array_equal(a.trap_freq_series, b.trap_freq_series)
    assert np.array_equal(a.error_signal, b.error_signal)
    c = run_closed_loop(ion, det, loop, duration=0.05, seed=78,
                        record_quadratures=False)
    assert not np.array_equal(a.counts.counts, c.counts.counts)


def test_zero_gain_leaves_trap_frequency_fixed():
    ion = IonParams()
    det = DetectionParams()
    loop = LoopConfig(reference=ReferenceSignal.sine(F0), gain=0.0)
    rec = run_closed_loop(ion, det, loop, duration=0.02, seed=5,
                          record_quadratures=False)
    assert np.all(rec.trap_freq_series == ion.omega0)
    assert rec.metadata["n_saturated_updates"] == 0


def test_actuation_stays_within_limit(loop_record):
    ion = IonParams()
    limit = loop_record.metadata["actuator_limit"]
    dev = np.abs(loop_record.trap_freq_series - ion.omega0)
    assert np.max(dev) <= limit * (1 + 1e-12)
    assert loop_record.metadata["saturation_duty_max"] <= 0.5
    assert loop_record.metadata["lock_warning"] is False


def test_loop_acquires_lock(loop_record):
    """0.1 s quadrature-phase window directions concentrate once locked.

    (Raw samples stay dispersed: the phase wanders freely whenever the
    thermal amplitude collapses. The windowed vector average keeps the
    coherent stretches that define the lock point.)
    """
    from ionlock.dsp import settle_time

    quad = loop_record.quadratures
    assert quad is not None and quad.units == "m"
    n0 = int(settle_time(quad.filter_spec) * quad.fs)
    ph = quad.phase()[n0:]
    w = int(0.1 * quad.fs)
    nwin = len(ph) // w
    cw = np.cos(ph[: nwin * w]).reshape(nwin, w).mean(axis=1)
    sw = np.sin(ph[: nwin * w]).reshape(nwin, w).mean(axis=1)
    phw = np.arctan2(sw, cw)
    circ_var = 1.0 - abs(np.mean(np.exp(1j * phw)))
    assert circ_var < 0.1


def test_saturation_raises_lock_warning():
    ion = IonParams()
    det = DetectionParams()
    loop = LoopConfig(reference=ReferenceSignal.sine(F0),
                      gain=1.0e11, actuator_limit=TWO_PI * 1.0)
    with pytest.warns(UserWarning, match="saturated"):
        rec = run_closed_loop(ion, det, loop, duration=0.05, seed=3,
                              record_quadratures=False)
    assert rec.metadata["lock_warning"] is True
    assert rec.metadata["saturation_duty_max"] > 0.5


def test_metadata_and_record_shape(loop_record):
    md = loop_record.metadata
    assert md["backend"] in ("compiled", "fallback")
    assert md["f_lo"] == pytest.approx(F0)
    assert md["duration"] == pytest.approx(1.0)
    n = len(loop_record.trap_freq_series)
    assert loop_record.rec_dt == md["update_dt"] * md["rec_stride"]
    assert n == len(loop_record.error_signal)
    assert abs(n * loop_record.rec_dt - 1.0) < 2 * loop_record.rec_dt
    times = loop_record.control_times()
    assert times[0] == pytest.approx(loop_record.rec_dt, rel=1e-12, abs=0)


# ----------------------------------------------------------- diagnostics ----

def test_suppression_band_zero_for_identical_records(loop_record):
    assert control.phase_noise_suppression_band(loop_record, loop_record) == 0.0


def test_suppression_band_positive_against_free_run(loop_record):
    ion = IonParams()
    det = DetectionParams()
    open_loop = LoopConfig(reference=ReferenceSignal.sine(F0), gain=0.0)
    rec_off = run_closed_loop(ion, det, open_loop, duration=1.0, seed=2718,
                              record_quadratures=False)
    width = control.phase_noise_suppression_band(loop_record, rec_off)
    assert width > 100.0


def test_suppression_band_needs_motional_line():
    rng = np.random.default_rng(21)
    counts = rng.poisson(17558.0 * 2e-7, size=1 << 19).astype(np.uint8)
    series = CountSeries(bin_dt=2e-7, counts=counts)
    flat = ClosedLoopRecord(counts=series, quadratures=None,
                            trap_freq_series=np.zeros(1),
                            error_signal=np.zeros(1), rec_dt=1.0,
                            metadata={"f_lo": F0})
    with pytest.raises(AnalysisError):
        control.phase_noise_suppression_band(flat, flat, segment_len=1 << 16)
    no_meta = ClosedLoopRecord(counts=series, quadratures=None,
                               trap_freq_series=np.zeros(1),
                               error_signal=np.zeros(1), rec_dt=1.0)
    with pytest.raises(ConfigurationError):
        control.phase_noise_suppression_band(no_meta, flat,
                                             segment_len=1 << 16)


def _band_psd():
    f_lo = 1.0e6
    freqs = f_lo + np.arange(-6000.0, 6001.0)
    values = np.full(len(freqs), 1.0)
    d = np.abs(freqs - f_lo)
    values[d <= 1500] += 4.0        # motional band
    values[d == 0] += 3000.0        # coherent carrier spike
    return PsdEstimate(freqs=freqs, values=values, rbw=1.0), f_lo


def test_motional_band_power_subtracts_floor():
    psd, f_lo = _band_psd()
    total = control.motional_band_power(psd, f_lo, 2000.0)
    assert total == pytest.approx(3000.0 + 4.0 * 3001, rel=1e-9)
    with pytest.raises(AnalysisError):
        control.motional_band_power(psd, f_lo + 1e6, 100.0)


def test_central_peak_fraction():
    psd, f_lo = _band_psd()
    frac = control.central_peak_fraction(psd, f_lo, 2000.0)
    peak = 3000.0 + 4.0 * 7  # +-3 bins around the carrier
    total = 3000.0 + 4.0 * 3001
    assert frac == pytest.approx(peak / total, rel=1e-9)
