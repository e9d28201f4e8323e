"""Command-line front end.

Verbs map one-to-one onto the library layers: ``simulate`` produces count
records from a scenario file, ``psd``/``lockin``/``g2`` run the matching
analyses, ``calibrate`` performs a drive-contrast displacement calibration,
``pll`` runs the trap-frequency feedback loop, ``reproduce`` executes a
named figure preset end to end, and ``report`` re-renders a stored report.

Exit codes: 0 on success (for ``reproduce``: only if every expectation
passed), 2 on configuration or usage errors, 3 when a reproduce run
completes but misses its expectation bands.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dsp, harness, io as ionio, kernels
from .control import run_closed_loop
from .detection import displacement_psd_scale
from .errors import ConfigurationError, IonlockError


def _read_scenario(path: str | None) -> harness.Scenario:
    if path is None or path == "-":
        return harness.parse_scenario("")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return harness.parse_scenario(fh.read())
    except OSError as e:
        raise ConfigurationError(f"cannot read scenario {path!r}: {e}") from e


def _overridden(scenario, args) -> harness.Scenario:
    overrides = {}
    if getattr(args, "duration", None) is not None:
        overrides["duration_s"] = float(args.duration)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = int(args.seed)
    if not overrides:
        return scenario
    return harness._apply_overrides(scenario, overrides, None)


def _out_dir(args) -> str:
    out = args.out_dir if args.out_dir else harness.default_out_dir()
    os.makedirs(out, exist_ok=True)
    return out


def _record(scenario):
    rec = harness._run_record(scenario)
    if scenario.loop is not None:
        return rec, rec.counts
    return None, rec


def _cmd_simulate(args) -> int:
    scenario = _overridden(_read_scenario(args.scenario), args)
    out = _out_dir(args)
    record, counts = _record(scenario)
    path = ionio.write_counts_npz(counts, os.path.join(out, "counts.npz"))
    csv = ionio.write_counts_csv(counts, os.path.join(out, "counts.csv"),
                                 frame_dt=counts.bin_dt
                                 * max(1, int(round(1e-3 / counts.bin_dt))))
    print(f"record: {counts.duration:.6g} s, {len(counts.counts)} bins of "
          f"{counts.bin_dt:.3g} s, mean rate {counts.mean_rate():.6g} /s")
    print(f"wrote {path}")
    print(f"wrote {csv}")
    if record is not None:
        cl = ionio.write_closed_loop_csv(
            record, os.path.join(out, "closed_loop.csv"))
        print(f"wrote {cl}")
    return 0


def _cmd_psd(args) -> int:
    scenario = _overridden(_read_scenario(args.scenario), args)
    out = _out_dir(args)
    _, counts = _record(scenario)
    est = dsp.welch_psd(counts, segment_len=args.segment_len,
                        window=args.window, overlap=args.overlap)
    path = ionio.write_psd_csv(est, os.path.join(out, "psd.csv"))
    print(f"psd: {len(est.freqs)} bins, rbw {est.rbw:.6g} Hz, "
          f"{est.n_averages} averages")
    print(f"wrote {path}")
    if args.fit:
        fit = dsp.lorentzian_fit(est)
        print(fit.report())
    return 0


def _cmd_lockin(args) -> int:
    scenario = _overridden(_read_scenario(args.scenario), args)
    out = _out_dir(args)
    _, counts = _record(scenario)
    scale = displacement_psd_scale(scenario.det) if args.calibrated else None
    rec = dsp.lockin(counts, f_lo=args.f_lo, lo_phase=args.lo_phase,
                     filter=(args.order, args.cutoff), out_fs=args.out_fs,
                     scale=scale)
    path = ionio.write_quadrature_csv(rec, os.path.join(out, "quadratures.csv"))
    n0 = int(dsp.settle_time(rec.filter_spec) * rec.fs)
    print(f"lock-in at {args.f_lo:.6g} Hz -> {len(rec.x1)} samples at "
          f"{rec.fs:.6g} Hz ({rec.units})")
    if n0 < len(rec.x1):
        print(f"std(X1) after settling: {np.std(rec.x1[n0:]):.6g} {rec.units}")
    else:
        print("record ends inside the filter settling transient; "
              "no steady-state std")
    print(f"wrote {path}")
    return 0


def _cmd_calibrate(args) -> int:
    scenario = _overridden(_read_scenario(args.scenario), args)
    if scenario.drive is None:
        raise ConfigurationError(
            "calibrate needs a scenario with a sine drive (the reference tone)"
        )
    out = _out_dir(args)
    report = harness.ExperimentReport(
        name="calibrate", scenario_hash=harness.scenario_hash(scenario))
    harness._run_fig2b(scenario, out, args.fast, report)
    print(harness.export_report(report, "text"))
    return 0


def _cmd_pll(args) -> int:
    scenario = _overridden(_read_scenario(args.scenario), args)
    if scenario.loop is None:
        raise ConfigurationError("pll needs a scenario with a loop section")
    out = _out_dir(args)
    record = harness._run_record(scenario)
    path = ionio.write_closed_loop_csv(record,
                                       os.path.join(out, "closed_loop.csv"))
    md = record.metadata
    print(f"closed loop: {md['duration']:.6g} s at gain {md['gain']:.6g}, "
          f"backend {md['backend']}")
    print(f"saturation duty (max over 1 s windows): "
          f"{md['saturation_duty_max']:.4g}")
    if md["lock_warning"]:
        print("warning: actuator saturated for most of at least one second")
    print(f"wrote {path}")
    return 0


def _cmd_g2(args) -> int:
    scenario = _overridden(_read_scenario(args.scenario), args)
    out = _out_dir(args)
    _, counts = _record(scenario)
    est = dsp.g2_spectrum(counts, max_lag=args.max_lag, center=args.center,
                          span=args.span)
    path = ionio.write_psd_csv(est, os.path.join(out, "g2.csv"))
    print(f"g2 spectrum: {len(est.freqs)} bins, rbw {est.rbw:.6g} Hz, "
          f"{est.n_averages} averages")
    print(f"wrote {path}")
    return 0


def _cmd_reproduce(args) -> int:
    report = harness.run_experiment(args.figure, out_dir=args.out_dir,
                                    seed=args.seed, fast=args.fast,
                                    render=args.render)
    print(harness.export_report(report, "text"))
    return 0 if report.passed else 3


def _cmd_report(args) -> int:
    try:
        with open(args.report, "r", encoding="utf-8") as fh:
            report = harness.load_report(fh.read())
    except OSError as e:
        raise ConfigurationError(f"cannot read report {args.report!r}: {e}") from e
    print(harness.export_report(report, args.format), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ionlock",
        description="simulate and analyse interferometric readout of a "
                    "trapped ion's motion",
    )
    p.add_argument("--version", action="version",
                   version=f"%(prog)s {__import__('ionlock').__version__} "
                           f"({kernels.BACKEND} backend)")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_arg(sp):
        sp.add_argument("scenario", nargs="?", default=None,
                        help="scenario YAML (omit or '-' for defaults)")
        sp.add_argument("-o", "--out-dir", default=None,
                        help="output directory (default $IONLOCK_OUT_DIR "
                             "or ./ionlock_out)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--duration", type=float, default=None,
                        help="override record length in seconds")

    sp = sub.add_parser("simulate", help="run a record and store the counts")
    scenario_arg(sp)
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("psd", help="Welch spectrum of a scenario's counts")
    scenario_arg(sp)
    sp.add_argument("--segment-len", type=int, default=1 << 20)
    sp.add_argument("--window", choices=("hann", "rect"), default="hann")
    sp.add_argument("--overlap", type=float, default=0.5)
    sp.add_argument("--fit", action="store_true",
                    help="fit a Lorentzian line and print the result")
    sp.set_defaults(func=_cmd_psd)

    sp = sub.add_parser("lockin", help="demodulate the counts at a frequency")
    scenario_arg(sp)
    sp.add_argument("--f-lo", type=float, required=True,
                    help="demodulation frequency in Hz")
    sp.add_argument("--lo-phase", type=float, default=0.0)
    sp.add_argument("--order", type=int, default=4)
    sp.add_argument("--cutoff", type=float, default=20.0)
    sp.add_argument("--out-fs", type=float, default=2500.0)
    sp.add_argument("--raw", dest="calibrated", action="store_false",
                    help="keep rate units instead of metres")
    sp.set_defaults(func=_cmd_lockin)

    sp = sub.add_parser("calibrate",
                        help="drive-contrast displacement calibration")
    scenario_arg(sp)
    sp.add_argument("--fast", action="store_true")
    sp.set_defaults(func=_cmd_calibrate)

    sp = sub.add_parser("pll", help="run the trap-frequency feedback loop")
    scenario_arg(sp)
    sp.set_defaults(func=_cmd_pll)

    sp = sub.add_parser("g2", help="intensity-correlation spectrum")
    scenario_arg(sp)
    sp.add_argument("--max-lag", type=float, required=True,
                    help="segment length in seconds (1/rbw)")
    sp.add_argument("--center", type=float, default=None,
                    help="zoom band centre in Hz")
    sp.add_argument("--span", type=float, default=None,
                    help="zoom band width in Hz")
    sp.set_defaults(func=_cmd_g2)

    sp = sub.add_parser("reproduce", help="run a named figure preset")
    sp.add_argument("figure", choices=harness.PRESET_NAMES)
    sp.add_argument("-o", "--out-dir", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--fast", action="store_true",
                    help="2 s records with widened statistical bands")
    sp.add_argument("--render", action="store_true",
                    help="also write PNG plots")
    sp.set_defaults(func=_cmd_reproduce)

    sp = sub.add_parser("report", help="re-render a stored report")
    sp.add_argument("report", help="path to a structured report JSON")
    sp.add_argument("--format", choices=("text", "structured"),
                    default="text")
    sp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IonlockError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
