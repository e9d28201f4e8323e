"""The nine headline acceptance checks, run against the full-scale presets.

Each test evaluates one numbered criterion at its stated tolerance and
appends a single PASS/FAIL line to the terminal summary (see conftest).
The preset fixture runs all seven figure presets end to end (~5 minutes);
everything else is computed directly from the library.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import j0

from conftest import ACCEPTANCE_LINES
from ionlock import dsp, harness
from ionlock.constants import KB
from ionlock.control import LoopConfig, ReferenceSignal, run_closed_loop
from ionlock.detection import (
    CountSeries,
    DetectionParams,
    displacement_psd_scale,
    sample_counts,
)
from ionlock.oscillator import (
    IonParams,
    Trajectory,
    analytic_psd,
    mean_square_displacement,
    simulate,
    sql_displacement,
    stream_trajectory,
)

TWO_PI = 2 * math.pi


def _criterion(n, label, checks):
    """Record one acceptance line; checks is a list of (description, ok)."""
    ok = all(flag for _, flag in checks)
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {label}")
    assert ok, f"criterion {n} ({label}): " + \
        "; ".join(d for d, flag in checks if not flag)


@pytest.fixture(scope="module")
def preset_reports(tmp_path_factory):
    """All seven figure presets, full scale, at their pinned seeds."""
    harness.clear_cache()
    out = tmp_path_factory.mktemp("acceptance")
    return {name: harness.run_experiment(name, out_dir=str(out / name))
            for name in harness.PRESET_NAMES}


def _values(report):
    return {k: v["value"] for k, v in report.metrics.items()}


def test_criterion_1_sql_value():
    val = sql_displacement()  # default mass (138 u) and trap (1.039 MHz)
    _criterion(1, f"standard quantum limit {val * 1e9:.3f} nm",
               [("within 0.5% of 5.94 nm",
                 abs(val - 5.94e-9) <= 0.005 * 5.94e-9)])


def test_criterion_2_free_running_spectrum(preset_reports):
    ra, rb = preset_reports["fig2a"], preset_reports["fig2b"]
    m = _values(rb)
    checks = [
        ("fwhm within 10% of 380 Hz",
         abs(m["fitted_fwhm_hz"] - 380.0) <= 38.0),
        ("f0 within 20 Hz of 1.039 MHz",
         abs(m["fitted_f0_hz"] - 1.039e6) <= 20.0),
        ("sqrt(area) within 5% of 51 nm",
         abs(m["sqrt_area_m"] - 51e-9) <= 0.05 * 51e-9),
        ("calibrated floor within 10% of 1.0e-18 m^2/Hz",
         abs(m["floor_m2_hz"] - 1.0e-18) <= 0.10e-18),
        ("resolution within 10% of 24 nm",
         abs(m["resolution_m"] - 24e-9) <= 2.4e-9),
        ("resolution/sql ratio within 4.1 +- 0.4",
         3.7 <= m["resolution_sql_ratio"] <= 4.5),
        ("each preset under 3 minutes",
         ra.runtime_s < 180.0 and rb.runtime_s < 180.0),
    ]
    _criterion(2, f"line {m['fitted_fwhm_hz']:.0f} Hz at "
                  f"{m['fitted_f0_hz']:.0f} Hz, floor "
                  f"{m['floor_m2_hz']:.2e} m^2/Hz, resolution "
                  f"{m['resolution_m'] * 1e9:.1f} nm", checks)


def test_criterion_3_lineshape_integral():
    ion = IonParams()
    f0 = ion.omega0 / TWO_PI
    # piecewise quadrature: a single quad over [0, 20 f0] cannot resolve a
    # 380 Hz line at 1 MHz and silently returns a fraction of the answer
    wi, wo = 2e3, 1e5
    edges = [0.0, f0 - wo, f0 - wi, f0 + wi, f0 + wo, 20 * f0]
    val = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        kw = {"points": [f0]} if a < f0 < b else {}
        piece, _ = quad(lambda f: float(analytic_psd(ion, f)), a, b,
                        limit=200, **kw)
        val += piece
    ref = KB * ion.temperature / (ion.mass * ion.omega0**2)
    err = abs(val - ref) / ref
    _criterion(3, f"analytic line integral, error {err:.2e}",
               [("integral equals thermal variance to 0.1%", err <= 1e-3)])


def test_criterion_4_quadrature_trajectories(preset_reports):
    m = _values(preset_reports["fig2cd"])
    checks = [
        ("on-resonance X1 std within 20% of 15 nm",
         abs(m["x1_std_onres_m"] - 15e-9) <= 0.20 * 15e-9),
        ("detuned X1 std within 20% of 7 nm",
         abs(m["x1_std_detuned_m"] - 7e-9) <= 0.20 * 7e-9),
        ("sqrt(380/30) bandwidth scaling within 20%",
         0.8 <= m["bandwidth_identity_ratio"] <= 1.2),
    ]
    _criterion(4, f"X1 std {m['x1_std_onres_m'] * 1e9:.1f} nm on resonance, "
                  f"{m['x1_std_detuned_m'] * 1e9:.1f} nm detuned", checks)


def test_criterion_5_shot_floor_purity():
    """Motion disabled: the count spectrum is the bare Poisson floor."""
    det = DetectionParams()
    n = 8_000_000
    traj = Trajectory(dt=1e-6, x_samples=np.zeros(n), start_time=0.0,
                      seed=None)
    series = sample_counts(traj, det, bin_dt=1e-6, seed=50505)
    est = dsp.welch_psd(series, segment_len=16384)
    vals = est.values[1:]
    floor = float(np.mean(vals))
    quarters = [float(np.mean(b)) for b in np.array_split(vals, 4)]
    # library spectra are one-sided; the quoted levels are two-sided, so
    # compare half the measured floor against them
    k = TWO_PI / det.wavelength
    ref_x = 1.0 / (4 * det.i0 * det.visibility**2
                   * k**2 * math.cos(det.theta)**2)
    sx = floor * displacement_psd_scale(det)
    checks = [
        ("at least 100 averages", est.n_averages >= 100),
        ("rate floor equals i0 within 5% (two-sided)",
         abs(floor / 2 - det.i0) <= 0.05 * det.i0),
        ("flat: quarter-band means within 5%",
         all(abs(q / floor - 1) <= 0.05 for q in quarters)),
        ("displacement floor matches 1/(4 i0 V^2 k^2 cos^2 theta) within 5%",
         abs(sx / 2 - ref_x) <= 0.05 * ref_x),
    ]
    _criterion(5, f"shot floor {floor / 2:.0f} (rate units) vs i0 "
                  f"{det.i0:.0f}, {est.n_averages} averages", checks)


def test_criterion_6_pll_lock(preset_reports):
    ma = _values(preset_reports["fig3a"])
    mb = _values(preset_reports["fig3b"])
    checks = [
        ("central peak fraction in [0.05, 0.25]",
         0.05 <= ma["central_peak_fraction"] <= 0.25),
        ("on/off sideband energy ratio within 1 +- 0.2",
         0.8 <= ma["band_energy_ratio"] <= 1.2),
        ("suppression band at least 500 Hz",
         ma["suppression_band_hz"] >= 500.0),
        ("1 Hz-bandwidth resolution below 0.5 sql",
         mb["resolution_1hz_sql_ratio"] < 0.5),
    ]
    _criterion(6, f"peak fraction {ma['central_peak_fraction']:.3f}, "
                  f"suppression {ma['suppression_band_hz']:.0f} Hz, "
                  f"1 Hz resolution {mb['resolution_1hz_sql_ratio']:.2f} sql",
               checks)


def test_criterion_7_fm_tracking(preset_reports):
    m = _values(preset_reports["fig3c"])
    rbw = 1.0  # 1 s correlation segments
    bessel = 0.330716  # J1(1)^2 / J0(1)^2
    checks = [
        ("carrier at the reference within one rbw",
         abs(m["carrier_offset_hz"]) <= rbw),
        ("upper sideband at +56.3 Hz within one rbw",
         abs(m["upper_sideband_offset_hz"]) <= rbw),
        ("lower sideband at -56.3 Hz within one rbw",
         abs(m["lower_sideband_offset_hz"]) <= rbw),
        ("sideband/carrier power within 20% of J1^2/J0^2",
         abs(m["sideband_carrier_ratio"] - bessel) <= 0.20 * bessel),
    ]
    _criterion(7, f"sideband/carrier {m['sideband_carrier_ratio']:.3f} "
                  f"(target {bessel:.3f})", checks)


def test_criterion_8_g2_line_width(preset_reports):
    m = _values(preset_reports["fig3d"])
    checks = [
        ("50 mHz resolution", abs(m["line_rbw_hz"] - 0.05) < 1e-12),
        ("locked line no wider than 2 bins", m["line_width_bins"] <= 2),
    ]
    _criterion(8, f"locked line {m['line_width_bins']:.0f} bin(s) at "
                  f"{m['line_rbw_hz'] * 1e3:.0f} mHz rbw", checks)


def test_criterion_9_invariants():
    checks = []

    # (a) Parseval, averaged hann estimate, 1%
    rng = np.random.default_rng(424242)
    x = rng.standard_normal(1 << 18)
    est = dsp.welch_array(x, fs=1.0, segment_len=4096)
    total = float(np.sum(est.values) * est.df)
    checks.append(("parseval within 1%",
                   abs(total - float(np.var(x))) <= 0.01 * float(np.var(x))))

    # (b) lock-in output magnitude invariant under the LO phase, 0.1%
    fs, f_sig, i0, nb = 1e5, 2.31e4, 2e4, 20000
    t = (np.arange(nb) + 0.5) / fs
    rate = i0 * (1 + 0.3 * np.cos(TWO_PI * f_sig * t - 0.8))
    series = CountSeries(bin_dt=1 / fs, counts=rate / fs)
    r0 = dsp.lockin(series, f_lo=f_sig, lo_phase=0.0, filter=(2, 100),
                    out_fs=1000)
    r1 = dsp.lockin(series, f_lo=f_sig, lo_phase=2.345, filter=(2, 100),
                    out_fs=1000)
    n0 = int(dsp.settle_time((2, 100)) * 1000) + 5
    m0 = np.hypot(r0.x1[n0:], r0.x2[n0:])
    m1 = np.hypot(r1.x1[n0:], r1.x2[n0:])
    checks.append(("lock-in phase invariance within 0.1%",
                   float(np.max(np.abs(m1 - m0) / m0)) <= 1e-3))

    # (c) drive-contrast calibration round trip on noisy points, 5%
    det = DetectionParams()
    s_true = 12e-9
    rng = np.random.default_rng(5)
    u = np.linspace(0.0, 4.0, 9)
    c = 0.97 * j0(det.fringe_wavevector * s_true * u) \
        + 2e-3 * rng.standard_normal(9)
    freqs = 1.0e6 + np.arange(32768) * 2.5
    vals = np.full(32768, 1e-18)
    vals[16600] += (s_true**2 / 2) / 2.5  # tone at 1.0415 MHz, unit drive
    psd = dsp.PsdEstimate(freqs=freqs, values=vals, rbw=2.5,
                          units="m^2/Hz", n_averages=64)
    cal = dsp.calibrate_displacement(psd, list(zip(u, c)), det,
                                     drive_amplitude=1.0,
                                     drive_frequency=freqs[16600])
    checks.append(("calibration round trip within 5%",
                   abs(cal.drive_to_amplitude - s_true) <= 0.05 * s_true))

    # (d) bit-exact determinism of both simulators
    ion = IonParams()
    loop = LoopConfig(reference=ReferenceSignal.sine(ion.omega0 / TWO_PI))
    recs = [run_closed_loop(ion, det, loop, 0.02, 25e-9, seed=123,
                            bin_dt=2e-7, record_quadratures=False)
            for _ in range(2)]
    trajs = [simulate(ion, None, duration=2e-3, dt=25e-9, seed=321)
             for _ in range(2)]
    checks.append(("determinism bit-exact",
                   np.array_equal(recs[0].counts.counts,
                                  recs[1].counts.counts)
                   and np.array_equal(recs[0].trap_freq_series,
                                      recs[1].trap_freq_series)
                   and np.array_equal(trajs[0].x_samples,
                                      trajs[1].x_samples)))

    # (e) a gain-0 loop is the open-loop experiment (95% z-tests)
    loop0 = LoopConfig(reference=ReferenceSignal.sine(ion.omega0 / TWO_PI),
                       gain=0.0)
    rec = run_closed_loop(ion, det, loop0, 1.0, 25e-9, seed=4242,
                          bin_dt=2e-7, record_quadratures=False)
    c1 = rec.counts.counts.astype(np.float64)
    chunks = stream_trajectory(ion, None, duration=1.0, dt=25e-9, seed=9797)
    c2 = sample_counts(chunks, det, bin_dt=2e-7, seed=9798).counts.astype(
        np.float64)
    z_mean = (c1.mean() - c2.mean()) / math.sqrt(
        c1.var() / len(c1) + c2.var() / len(c2))
    m4 = [float(np.mean((a - a.mean())**4)) for a in (c1, c2)]
    z_var = (c1.var() - c2.var()) / math.sqrt(
        (m4[0] - c1.var()**2) / len(c1) + (m4[1] - c2.var()**2) / len(c2))

    def band_power(counts):
        # disjoint rect segments: bin estimates are independent, so the
        # chi^2 variance of the band power is exact
        s = CountSeries(bin_dt=2e-7, counts=counts)
        e = dsp.welch_psd(s, segment_len=1 << 19, window="rect", overlap=0.0)
        f0 = ion.omega0 / TWO_PI
        sel = (e.freqs >= f0 - 3e3) & (e.freqs <= f0 + 3e3)
        p = float(np.sum(e.values[sel]) * e.df)
        var = float(np.sum((e.values[sel] * e.df)**2) / e.n_averages)
        return p, var

    p1, v1 = band_power(c1)
    p2, v2 = band_power(c2)
    z_band = (p1 - p2) / math.sqrt(v1 + v2)
    for name, z in (("mean rate", z_mean), ("count variance", z_var),
                    ("motional band power", z_band)):
        checks.append((f"gain-0 vs open loop, {name} z = {z:.2f}",
                       abs(z) <= 1.96))

    _criterion(9, "spectral, lock-in, calibration and reproducibility "
                  "invariants", checks)
