"""Scenario files, figure presets, experiment orchestration and reports.

A Scenario is the complete, explicit description of one simulated
measurement: ion, detection channel, optional drive, optional feedback
loop, record geometry, seed, and an ordered list of analyses. Scenarios
live in versioned YAML documents with every default spelled out on
serialization, so an archived scenario file fully determines its outputs
(CSV files are byte-identical across reruns).

``run_experiment`` provides named presets reproducing the standard
measurements end to end - free-running spectrum with calibration tone,
contrast-scan displacement calibration, homodyne quadrature records, the
phase lock on/off comparison, FM tracking, and sub-RBW line spectroscopy -
and writes their data files plus a pass/fail report.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import dsp, io as ionio, kernels
from .constants import (
    DEFAULT_BIN_DT,
    DEFAULT_DT,
    SCENARIO_SCHEMA_VERSION,
)
from .control import (
    DEFAULT_LOOP_GAIN,
    ClosedLoopRecord,
    LoopConfig,
    ReferenceSignal,
    central_peak_fraction,
    motional_band_power,
    phase_noise_suppression_band,
    run_closed_loop,
)
from .detection import (
    CountSeries,
    DetectionParams,
    displacement_psd_scale,
    sample_counts,
)
from .errors import AnalysisError, ConfigurationError, IonlockError
from .oscillator import (
    DriveSignal,
    IonParams,
    mean_square_displacement,
    stream_trajectory,
)

PRESET_NAMES = ("fig2a", "fig2b", "fig2cd", "fig3a", "fig3b", "fig3c", "fig3d")

OUT_DIR_ENV = "IONLOCK_OUT_DIR"

_TWO_PI = 2 * math.pi


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """One fully specified simulated measurement."""

    ion: IonParams
    det: DetectionParams
    drive: DriveSignal | None
    loop: LoopConfig | None
    duration: float
    dt: float
    bin_dt: float
    seed: int
    analyses: tuple = ()

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigurationError("key 'duration_s': must be positive")
        if self.dt <= 0 or self.bin_dt < self.dt:
            raise ConfigurationError(
                "key 'bin_dt_s': must be >= dt_s and both positive"
            )
        if not self.analyses:
            raise ConfigurationError("key 'analyses': must be a non-empty list")
        if self.drive is not None and self.drive.kind == "samples":
            raise ConfigurationError(
                "key 'drive.kind': sampled drives are not representable in "
                "scenario files"
            )


def _default_analyses() -> tuple:
    return (
        {"kind": "welch", "segment_len": 1 << 20, "window": "hann",
         "overlap": 0.5},
    )


_ANALYSIS_DEFAULTS = {
    "welch": {"segment_len": 1 << 20, "window": "hann", "overlap": 0.5},
    "fit": {"window_hz": None, "exclude_hz": []},
    "lockin": {"f_lo_hz": None, "order": 4, "cutoff_hz": 20.0,
               "out_fs_hz": 2500.0, "lo_phase_rad": 0.0, "label": None},
    "g2": {"max_lag_s": None, "center_hz": None, "span_hz": None,
           "skip_s": 0.0},
    "resolution": {"bandwidth_hz": None},
}

_ANALYSIS_REQUIRED = {"lockin": ("f_lo_hz",), "g2": ("max_lag_s",)}


def _need(doc: dict, key: str, types, where: str, default=None, required=False):
    if key not in doc:
        if required:
            raise ConfigurationError(f"key '{where}{key}': required")
        return default
    v = doc.pop(key)
    wants_float = types is float or (isinstance(types, tuple) and float in types)
    if wants_float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    bad = types is not None and not isinstance(v, types)
    if isinstance(v, bool) and types is not bool:
        bad = True
    if bad:
        want = types.__name__ if isinstance(types, type) else "value"
        raise ConfigurationError(
            f"key '{where}{key}': expected {want}, got {type(v).__name__} ({v!r})"
        )
    return v


def _reject_unknown(doc: dict, where: str):
    if doc:
        k = sorted(doc)[0]
        raise ConfigurationError(f"unknown key '{where}{k}'")


def _parse_ion(doc, where="ion."):
    doc = dict(doc or {})
    d = IonParams()
    out = IonParams(
        mass=_need(doc, "mass_kg", float, where, d.mass),
        omega0=_need(doc, "omega0_rad_s", float, where, d.omega0),
        gamma=_need(doc, "gamma_rad_s", float, where, d.gamma),
        temperature=_need(doc, "temperature_k", float, where, d.temperature),
    )
    _reject_unknown(doc, where)
    return out


def _parse_det(doc, where="detection."):
    doc = dict(doc or {})
    d = DetectionParams()
    out = DetectionParams(
        i0=_need(doc, "i0_counts_s", float, where, d.i0),
        visibility=_need(doc, "visibility", float, where, d.visibility),
        theta=_need(doc, "theta_rad", float, where, d.theta),
        wavelength=_need(doc, "wavelength_m", float, where, d.wavelength),
        fringe_phase=_need(doc, "fringe_phase_rad", float, where, d.fringe_phase),
        transduction=_need(doc, "transduction", str, where, d.transduction),
    )
    _reject_unknown(doc, where)
    return out


def _parse_drive(doc, where="drive."):
    if doc is None:
        return None
    doc = dict(doc)
    kind = _need(doc, "kind", str, where, "sine")
    if kind == "none":
        _reject_unknown(doc, where)
        return None
    if kind != "sine":
        raise ConfigurationError(
            f"key '{where}kind': must be 'none' or 'sine', got {kind!r}"
        )
    out = DriveSignal.sine(
        _need(doc, "force_n", float, where, required=True),
        _need(doc, "frequency_rad_s", float, where, required=True),
        _need(doc, "phase_rad", float, where, 0.0),
    )
    _reject_unknown(doc, where)
    return out


def _parse_reference(doc, where="loop.reference."):
    doc = dict(doc or {})
    kind = _need(doc, "kind", str, where, "sine")
    freq = _need(doc, "frequency_hz", float, where, required=True)
    phase0 = _need(doc, "phase0_rad", float, where, 0.0)
    if kind == "sine":
        out = ReferenceSignal.sine(freq, phase0)
    elif kind == "fm":
        out = ReferenceSignal.fm(
            freq, _need(doc, "mod_frequency_hz", float, where, 56.3),
            _need(doc, "mod_index", float, where, 1.0), phase0,
        )
    else:
        raise ConfigurationError(
            f"key '{where}kind': must be 'sine' or 'fm', got {kind!r}"
        )
    _reject_unknown(doc, where)
    return out


def _parse_loop(doc, where="loop."):
    if doc is None:
        return None
    doc = dict(doc)
    ref = _parse_reference(_need(doc, "reference", dict, where, required=True))
    d = LoopConfig(reference=ref)
    out = LoopConfig(
        reference=ref,
        gain=_need(doc, "gain", float, where, d.gain),
        loop_cutoff=_need(doc, "loop_cutoff_hz", float, where, d.loop_cutoff),
        loop_order=_need(doc, "loop_order", int, where, d.loop_order),
        integral_gain=_need(doc, "integral_gain", float, where, d.integral_gain),
        actuator_limit=_need(doc, "actuator_limit_rad_s", float, where,
                             d.actuator_limit),
        update_dt=_need(doc, "update_dt_s", (float, type(None)), where, None),
    )
    _reject_unknown(doc, where)
    return out


def _parse_analyses(items, where="analyses"):
    if items is None:
        return _default_analyses()
    if not isinstance(items, list) or not items:
        raise ConfigurationError(f"key '{where}': must be a non-empty list")
    out = []
    for i, item in enumerate(items):
        w = f"{where}[{i}]."
        if not isinstance(item, dict):
            raise ConfigurationError(f"key '{where}[{i}]': expected a mapping")
        item = dict(item)
        kind = _need(item, "kind", str, w, required=True)
        if kind not in _ANALYSIS_DEFAULTS:
            raise ConfigurationError(
                f"key '{w}kind': unknown analysis {kind!r}; expected one of "
                f"{sorted(_ANALYSIS_DEFAULTS)}"
            )
        spec = {"kind": kind}
        for k, dflt in _ANALYSIS_DEFAULTS[kind].items():
            v = item.pop(k, dflt)
            spec[k] = v
        _reject_unknown(item, w)
        for k in _ANALYSIS_REQUIRED.get(kind, ()):
            if spec[k] is None:
                raise ConfigurationError(f"key '{w}{k}': required")
        out.append(spec)
    return tuple(out)


def parse_scenario(text: str) -> Scenario:
    """Parse and fully validate a YAML scenario document.

    An empty document yields the all-defaults Scenario; unknown keys are
    rejected by name; every constraint violation names its key. The schema
    is versioned: documents declaring a different schema_version refuse to
    load.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"malformed scenario document: {e}") from e
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigurationError("scenario document must be a mapping")
    doc = copy.deepcopy(doc)
    version = _need(doc, "schema_version", int, "", SCENARIO_SCHEMA_VERSION)
    if version != SCENARIO_SCHEMA_VERSION:
        raise ConfigurationError(
            f"key 'schema_version': {version} does not match this package's "
            f"schema {SCENARIO_SCHEMA_VERSION}"
        )
    ion = _parse_ion(_need(doc, "ion", (dict, type(None)), "", None))
    det = _parse_det(_need(doc, "detection", (dict, type(None)), "", None))
    drive = _parse_drive(_need(doc, "drive", (dict, type(None)), "", None))
    loop = _parse_loop(_need(doc, "loop", (dict, type(None)), "", None))
    scenario = Scenario(
        ion=ion, det=det, drive=drive, loop=loop,
        duration=_need(doc, "duration_s", float, "", 1.0),
        dt=_need(doc, "dt_s", float, "", DEFAULT_DT),
        bin_dt=_need(doc, "bin_dt_s", float, "", DEFAULT_BIN_DT),
        seed=_need(doc, "seed", int, "", 0),
        analyses=_parse_analyses(_need(doc, "analyses", (list, type(None)), "", None)),
    )
    _reject_unknown(doc, "")
    return scenario


def scenario_to_dict(s: Scenario) -> dict:
    """Plain-dict form with every default explicit (the echo output)."""
    d = {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "seed": int(s.seed),
        "duration_s": float(s.duration),
        "dt_s": float(s.dt),
        "bin_dt_s": float(s.bin_dt),
        "ion": {
            "mass_kg": float(s.ion.mass),
            "omega0_rad_s": float(s.ion.omega0),
            "gamma_rad_s": float(s.ion.gamma),
            "temperature_k": float(s.ion.temperature),
        },
        "detection": {
            "i0_counts_s": float(s.det.i0),
            "visibility": float(s.det.visibility),
            "theta_rad": float(s.det.theta),
            "wavelength_m": float(s.det.wavelength),
            "fringe_phase_rad": float(s.det.fringe_phase),
            "transduction": s.det.transduction,
        },
        "drive": None,
        "loop": None,
        "analyses": [dict(a) for a in s.analyses],
    }
    if s.drive is not None:
        d["drive"] = {
            "kind": "sine",
            "force_n": float(s.drive.force_amplitude),
            "frequency_rad_s": float(s.drive.frequency),
            "phase_rad": float(s.drive.phase),
        }
    if s.loop is not None:
        ref = {
            "kind": s.loop.reference.kind,
            "frequency_hz": float(s.loop.reference.frequency),
            "phase0_rad": float(s.loop.reference.phase0),
        }
        if s.loop.reference.kind == "fm":
            ref["mod_frequency_hz"] = float(s.loop.reference.mod_frequency)
            ref["mod_index"] = float(s.loop.reference.mod_index)
        d["loop"] = {
            "reference": ref,
            "gain": float(s.loop.gain),
            "loop_cutoff_hz": float(s.loop.loop_cutoff),
            "loop_order": int(s.loop.loop_order),
            "integral_gain": float(s.loop.integral_gain),
            "actuator_limit_rad_s": float(s.loop.actuator_limit),
            "update_dt_s": None if s.loop.update_dt is None else float(s.loop.update_dt),
        }
    return d


def serialize_scenario(s: Scenario) -> str:
    """YAML echo of a Scenario with all defaults explicit; parse-stable."""
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=True,
                          default_flow_style=False)


def scenario_hash(s: Scenario) -> str:
    """Stable 12-hex-digit digest of the fully explicit scenario."""
    blob = json.dumps(scenario_to_dict(s), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# simulation cache (lets presets share the expensive records)
# ---------------------------------------------------------------------------

_SIM_CACHE: OrderedDict = OrderedDict()
_SIM_CACHE_MAX = 3


def clear_cache():
    """Drop cached simulation records (tests use this to force recompute)."""
    _SIM_CACHE.clear()


def _sim_key(s: Scenario) -> str:
    d = scenario_to_dict(s)
    d.pop("analyses")
    return json.dumps(d, sort_keys=True)


def _cached(key: str, build):
    if key in _SIM_CACHE:
        _SIM_CACHE.move_to_end(key)
        return _SIM_CACHE[key]
    value = build()
    _SIM_CACHE[key] = value
    while len(_SIM_CACHE) > _SIM_CACHE_MAX:
        _SIM_CACHE.popitem(last=False)
    return value


def _simulate_counts(s: Scenario) -> CountSeries:
    chunks = stream_trajectory(s.ion, s.drive, duration=s.duration, dt=s.dt,
                               seed=s.seed)
    return sample_counts(chunks, s.det, bin_dt=s.bin_dt, seed=s.seed + 1)


def _run_record(s: Scenario):
    """CountSeries (open loop) or ClosedLoopRecord (loop scenarios)."""
    if s.loop is None:
        return _cached(_sim_key(s), lambda: _simulate_counts(s))
    return _cached(
        _sim_key(s),
        lambda: run_closed_loop(s.ion, s.det, s.loop, s.duration, s.dt,
                                seed=s.seed, bin_dt=s.bin_dt),
    )


# ---------------------------------------------------------------------------
# analysis engine
# ---------------------------------------------------------------------------

def _stage(name):
    """Decorate analysis failures with the stage that produced them."""
    class _ctx:
        def __enter__(self):
            return self

        def __exit__(self, etype, e, tb):
            if e is None:
                return False
            if isinstance(e, IonlockError):
                raise type(e)(f"[stage {name}] {e}") from e
            if isinstance(e, Exception):
                raise AnalysisError(f"[stage {name}] {e!r}") from e
            return False
    return _ctx()


def execute_scenario(s: Scenario, out_dir, prefix: str) -> dict:
    """Run a scenario's record and analyses, writing one file per stage.

    Returns an artifact dict: 'counts' (CountSeries), 'record'
    (ClosedLoopRecord, loop scenarios only), one entry per analysis keyed
    by its kind (suffixed with its index when repeated, lock-ins by label),
    and 'files' mapping stage labels to written paths.
    """
    artifacts = {}
    files = {}
    record = _run_record(s)
    if isinstance(record, ClosedLoopRecord):
        artifacts["record"] = record
        counts = record.counts
    else:
        counts = record
    artifacts["counts"] = counts

    with _stage("counts"):
        frame = s.bin_dt * max(1, int(round(1e-3 / s.bin_dt)))
        files["counts"] = ionio.write_counts_csv(
            counts, os.path.join(out_dir, f"{prefix}_counts.csv"), frame_dt=frame
        )

    seen = {}
    last_psd = None
    for spec in s.analyses:
        kind = spec["kind"]
        seen[kind] = seen.get(kind, 0) + 1
        label = kind if seen[kind] == 1 else f"{kind}{seen[kind]}"
        if kind == "lockin" and spec.get("label"):
            label = str(spec["label"])
        with _stage(label):
            if kind == "welch":
                est = dsp.welch_psd(counts, segment_len=int(spec["segment_len"]),
                                    window=spec["window"],
                                    overlap=float(spec["overlap"]))
                artifacts[label] = est
                last_psd = est
                files[label] = ionio.write_psd_csv(
                    est, os.path.join(out_dir, f"{prefix}_{label}.csv"))
            elif kind == "fit":
                if last_psd is None:
                    raise AnalysisError("fit requires a preceding welch analysis")
                exclude = [tuple(b) for b in (spec["exclude_hz"] or [])]
                window = spec["window_hz"]
                fit = dsp.lorentzian_fit(
                    last_psd, f_window=None if window is None else tuple(window),
                    exclude=exclude)
                artifacts[label] = fit
                files[label] = ionio.atomic_write_text(
                    os.path.join(out_dir, f"{prefix}_{label}.txt"),
                    fit.report() + "\n")
            elif kind == "lockin":
                rec = dsp.lockin(
                    counts, f_lo=float(spec["f_lo_hz"]),
                    lo_phase=float(spec["lo_phase_rad"]),
                    filter=(int(spec["order"]), float(spec["cutoff_hz"])),
                    out_fs=float(spec["out_fs_hz"]),
                    scale=displacement_psd_scale(s.det))
                artifacts[label] = rec
                files[label] = ionio.write_quadrature_csv(
                    rec, os.path.join(out_dir, f"{prefix}_{label}.csv"))
            elif kind == "g2":
                src = counts
                skip = float(spec["skip_s"] or 0.0)
                if skip > 0.0:
                    # spectroscopy starts once the loop has settled
                    k = int(round(skip / counts.bin_dt))
                    if k >= len(counts.counts):
                        raise AnalysisError(
                            f"skip_s={skip} leaves no data to analyse")
                    src = CountSeries(bin_dt=counts.bin_dt,
                                      counts=counts.counts[k:],
                                      start_time=counts.start_time
                                      + k * counts.bin_dt)
                est = dsp.g2_spectrum(
                    src, max_lag=float(spec["max_lag_s"]),
                    center=spec["center_hz"], span=spec["span_hz"])
                artifacts[label] = est
                last_psd = est
                files[label] = ionio.write_psd_csv(
                    est, os.path.join(out_dir, f"{prefix}_{label}.csv"))
            elif kind == "resolution":
                if spec["bandwidth_hz"] is not None:
                    bw = float(spec["bandwidth_hz"])
                else:
                    fit = artifacts.get("fit")
                    if fit is None:
                        raise AnalysisError(
                            "resolution needs bandwidth_hz or a preceding fit")
                    bw = dsp.enbw_lorentzian(fit.fwhm)
                if last_psd is None:
                    raise AnalysisError("resolution requires a preceding welch")
                floor = float(np.median(last_psd.values[1:]))
                if last_psd.units != "m^2/Hz":
                    floor *= displacement_psd_scale(s.det)
                res, ratio = dsp.resolution_metric(floor, bw, s.ion)
                artifacts[label] = {"bandwidth_hz": bw, "resolution_m": res,
                                    "sql_ratio": ratio}
    artifacts["files"] = files
    return artifacts


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    """Headline metrics and pass/fail expectations of one experiment."""

    name: str
    scenario_hash: str
    schema_version: int = SCENARIO_SCHEMA_VERSION
    fast: bool = False
    backend: str = kernels.BACKEND
    runtime_s: float = 0.0
    files: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)       # name -> {value, units, source}
    expectations: list = field(default_factory=list)  # {name, lo, hi, value, units, passed}

    @property
    def passed(self) -> bool:
        return all(e["passed"] for e in self.expectations)

    def metric(self, name: str):
        return self.metrics[name]["value"]


def _expect(expectations, name, value, lo, hi, units=""):
    passed = bool(lo <= value <= hi) and math.isfinite(value)
    expectations.append({"name": name, "value": float(value), "lo": float(lo),
                         "hi": float(hi), "units": units, "passed": passed})
    return passed


def export_report(report: ExperimentReport, format: str = "text") -> str:
    """Render a report as fixed-order text or a structured JSON document."""
    if format == "structured":
        doc = {
            "schema_version": report.schema_version,
            "name": report.name,
            "scenario_hash": report.scenario_hash,
            "fast": report.fast,
            "backend": report.backend,
            "runtime_s": report.runtime_s,
            "files": {k: str(v) for k, v in sorted(report.files.items())},
            "metrics": {k: report.metrics[k] for k in sorted(report.metrics)},
            "expectations": report.expectations,
            "passed": report.passed,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if format != "text":
        raise ConfigurationError(f"unknown report format {format!r}")
    lines = [
        f"experiment: {report.name}",
        f"schema_version: {report.schema_version}",
        f"scenario: {report.scenario_hash}",
        f"backend: {report.backend}",
        f"fast_mode: {report.fast}",
        f"runtime_s: {report.runtime_s:.2f}",
        "",
        "metrics:",
    ]
    for k in sorted(report.metrics):
        m = report.metrics[k]
        lines.append(f"  {k} = {m['value']:.6g} {m['units']}".rstrip()
                     + f"   [{m['source']}]")
    lines.append("")
    lines.append("expectations:")
    for e in report.expectations:
        flag = "PASS" if e["passed"] else "FAIL"
        lines.append(
            f"  [{flag}] {e['name']}: {e['value']:.6g} in "
            f"[{e['lo']:.6g}, {e['hi']:.6g}] {e['units']}".rstrip()
        )
    lines.append("")
    lines.append(f"result: {'PASS' if report.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def load_report(text: str) -> ExperimentReport:
    """Rebuild an ExperimentReport from its structured export."""
    doc = json.loads(text)
    if doc.get("schema_version") != SCENARIO_SCHEMA_VERSION:
        raise ConfigurationError(
            f"report schema {doc.get('schema_version')!r} does not match "
            f"this package's schema {SCENARIO_SCHEMA_VERSION}"
        )
    return ExperimentReport(
        name=doc["name"], scenario_hash=doc["scenario_hash"],
        schema_version=doc["schema_version"], fast=doc["fast"],
        backend=doc["backend"], runtime_s=doc["runtime_s"],
        files=dict(doc["files"]), metrics=dict(doc["metrics"]),
        expectations=list(doc["expectations"]),
    )


def _metric(metrics, name, value, units, source):
    metrics[name] = {"value": float(value), "units": units, "source": source}


# ---------------------------------------------------------------------------
# figure presets
# ---------------------------------------------------------------------------

_TONE_DETUNING_HZ = 2.5e3
_TONE_FORCE_N = 1.412e-21     # 30 nm of coherent motion at +2.5 kHz detuning
_QUAD_DETUNING_HZ = 5.0e3

_PRESET_SEEDS = {"fig2a": 11021, "fig2b": 11021, "fig2cd": 11023,
                 "fig3a": 11031, "fig3b": 11031, "fig3c": 11033,
                 "fig3d": 11031}


def _fig2_record_scenario(fast: bool, seed: int) -> Scenario:
    """Shared free-running record: thermal line + 2.5 kHz calibration tone."""
    ion = IonParams()
    det = DetectionParams(transduction="linear")
    f_tone = ion.omega0 / _TWO_PI + _TONE_DETUNING_HZ
    drive = DriveSignal.sine(_TONE_FORCE_N, _TWO_PI * f_tone)
    seg = 1 << (19 if fast else 21)
    analyses = (
        {"kind": "welch", "segment_len": seg, "window": "hann", "overlap": 0.5},
        {"kind": "fit", "window_hz": None,
         "exclude_hz": [[f_tone - 400.0, f_tone + 400.0]]},
    )
    return Scenario(ion=ion, det=det, drive=drive, loop=None,
                    duration=2.0 if fast else 20.0, dt=DEFAULT_DT,
                    bin_dt=DEFAULT_BIN_DT, seed=seed, analyses=analyses)


def _fig3_scenario(fast: bool, seed: int, gain: float,
                   reference: ReferenceSignal) -> Scenario:
    ion = IonParams()
    det = DetectionParams()
    loop = LoopConfig(reference=reference, gain=gain)
    seg = 1 << (19 if fast else 21)
    analyses = (
        {"kind": "welch", "segment_len": seg, "window": "hann", "overlap": 0.5},
    )
    return Scenario(ion=ion, det=det, drive=None, loop=loop,
                    duration=2.0 if fast else 20.0, dt=DEFAULT_DT,
                    bin_dt=2e-7, seed=seed, analyses=analyses)


def _apply_overrides(s: Scenario, overrides, seed) -> Scenario:
    d = scenario_to_dict(s)
    if overrides:
        def merge(base, extra, path=""):
            for k, v in extra.items():
                if isinstance(v, dict) and isinstance(base.get(k), dict):
                    merge(base[k], v, f"{path}{k}.")
                else:
                    base[k] = v
        if isinstance(overrides, Scenario):
            overrides = scenario_to_dict(overrides)
        if not isinstance(overrides, dict):
            raise ConfigurationError("overrides must be a mapping or Scenario")
        merge(d, copy.deepcopy(overrides))
    if seed is not None:
        d["seed"] = int(seed)
    return parse_scenario(yaml.safe_dump(d))


def _tone_frequency(s: Scenario) -> float:
    return s.drive.frequency / _TWO_PI


def _run_fig2a(scenario: Scenario, out_dir: str, fast: bool,
               report: ExperimentReport):
    art = execute_scenario(scenario, out_dir, "fig2a")
    report.files.update(art["files"])
    fit = art["fit"]
    psd = art["welch"]
    f_tone = _tone_frequency(scenario)
    rate_floor = fit.floor
    tone_p = dsp.tone_power(psd, f_tone)
    m = report.metrics
    _metric(m, "fitted_fwhm_hz", fit.fwhm, "Hz", "fig2a_fit.txt")
    _metric(m, "fitted_f0_hz", fit.f0, "Hz", "fig2a_fit.txt")
    _metric(m, "rate_floor", rate_floor, "counts^2/s^2/Hz", "fig2a_welch.csv")
    _metric(m, "tone_power_rate", tone_p, "counts^2/s^2", "fig2a_welch.csv")
    ion = scenario.ion
    tol_w = 0.25 if fast else 0.10
    tol_f = 60.0 if fast else 20.0
    gamma_hz = ion.gamma / _TWO_PI
    f0_hz = ion.omega0 / _TWO_PI
    e = report.expectations
    _expect(e, "fitted_fwhm_hz", fit.fwhm, gamma_hz * (1 - tol_w),
            gamma_hz * (1 + tol_w), "Hz")
    _expect(e, "fitted_f0_hz", fit.f0, f0_hz - tol_f, f0_hz + tol_f, "Hz")
    floor_nom = 2.0 * scenario.det.i0
    _expect(e, "rate_floor", rate_floor, floor_nom * 0.90, floor_nom * 1.10,
            "counts^2/s^2/Hz")
    return art


def _measure_contrast(ion, det_top, drive, duration, dt, seed) -> float:
    chunks = stream_trajectory(ion, drive, duration=duration, dt=dt, seed=seed)
    series = sample_counts(chunks, det_top, bin_dt=1e-6, seed=seed + 1)
    return series.mean_rate() / det_top.i0 - 1.0


def _run_fig2b(scenario: Scenario, out_dir: str, fast: bool,
               report: ExperimentReport):
    art = execute_scenario(scenario, out_dir, "fig2b")
    report.files.update(art["files"])
    psd = art["welch"]
    ion, det = scenario.ion, scenario.det
    f_tone = _tone_frequency(scenario)

    # contrast scan at the fringe top with the physical (sine) fringe
    det_top = replace(det, fringe_phase=math.pi / 2, transduction="sine")
    scan_dur = 0.4 if fast else 1.0
    forces = _TONE_FORCE_N * np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0])
    pairs = []
    for i, f_n in enumerate(forces):
        drv = (DriveSignal.sine(f_n, scenario.drive.frequency)
               if f_n > 0 else None)
        c = _measure_contrast(ion, det_top, drv, scan_dur, scenario.dt,
                              seed=scenario.seed + 100 + 7 * i)
        pairs.append((float(f_n), float(c)))
    report.files["contrast"] = ionio.atomic_write_text(
        os.path.join(out_dir, "fig2b_contrast.csv"),
        f"# ionlock-schema: {SCENARIO_SCHEMA_VERSION}\ndrive_n,contrast\n"
        + "".join(f"{format(u, '.11e')},{format(c, '.11e')}\n"
                  for u, c in pairs),
    )

    cal = dsp.calibrate_displacement(psd, pairs, det,
                                     drive_amplitude=_TONE_FORCE_N,
                                     drive_frequency=f_tone)
    psd_m = dsp.apply_calibration(psd, cal)
    report.files["psd_m2"] = ionio.write_psd_csv(
        psd_m, os.path.join(out_dir, "fig2b_psd_calibrated.csv"))
    fit = dsp.lorentzian_fit(
        psd_m, exclude=[(f_tone - 400.0, f_tone + 400.0)])
    enbw = dsp.enbw_lorentzian(fit.fwhm)
    res, ratio = dsp.resolution_metric(fit.floor, enbw, ion)

    m = report.metrics
    _metric(m, "cal_scale_m2_per_rate2", cal.scale, "m^2 s^2/counts^2",
            "fig2b_contrast.csv")
    _metric(m, "cal_residual", cal.residual, "", "fig2b_contrast.csv")
    _metric(m, "drive_to_amplitude", cal.drive_to_amplitude, "m/N",
            "fig2b_contrast.csv")
    _metric(m, "fitted_fwhm_hz", fit.fwhm, "Hz", "fig2b_psd_calibrated.csv")
    _metric(m, "fitted_f0_hz", fit.f0, "Hz", "fig2b_psd_calibrated.csv")
    _metric(m, "sqrt_area_m", math.sqrt(max(fit.area, 0.0)), "m",
            "fig2b_psd_calibrated.csv")
    _metric(m, "floor_m2_hz", fit.floor, "m^2/Hz", "fig2b_psd_calibrated.csv")
    _metric(m, "enbw_hz", enbw, "Hz", "fig2b_psd_calibrated.csv")
    _metric(m, "resolution_m", res, "m", "fig2b_psd_calibrated.csv")
    _metric(m, "resolution_sql_ratio", ratio, "", "fig2b_psd_calibrated.csv")

    sigma = math.sqrt(mean_square_displacement(ion))
    tol_a = 0.12 if fast else 0.05
    tol_fl = 0.20 if fast else 0.10
    e = report.expectations
    gamma_hz = ion.gamma / _TWO_PI
    f0_hz = ion.omega0 / _TWO_PI
    tol_w = 0.25 if fast else 0.10
    tol_f = 60.0 if fast else 20.0
    _expect(e, "fitted_fwhm_hz", fit.fwhm, gamma_hz * (1 - tol_w),
            gamma_hz * (1 + tol_w), "Hz")
    _expect(e, "fitted_f0_hz", fit.f0, f0_hz - tol_f, f0_hz + tol_f, "Hz")
    _expect(e, "sqrt_area_m", math.sqrt(max(fit.area, 0.0)),
            sigma * (1 - tol_a), sigma * (1 + tol_a), "m")
    _expect(e, "floor_m2_hz", fit.floor, 1.0e-18 * (1 - tol_fl),
            1.0e-18 * (1 + tol_fl), "m^2/Hz")
    _expect(e, "resolution_m", res, 24e-9 * 0.90, 24e-9 * 1.10, "m")
    _expect(e, "resolution_sql_ratio", ratio, 3.7, 4.5, "")
    _expect(e, "cal_residual", cal.residual, 0.0, 0.10, "")
    return art


def _run_fig2cd(scenario: Scenario, out_dir: str, fast: bool,
                report: ExperimentReport):
    art = execute_scenario(scenario, out_dir, "fig2cd")
    report.files.update(art["files"])
    ion = scenario.ion
    q_on = art["onres"]
    q_off = art["detuned"]
    settle = dsp.settle_time((4, 20.0))
    n0 = int(settle * q_on.fs)
    std_on = float(np.std(q_on.x1[n0:]))
    std_off = float(np.std(q_off.x1[n0:]))
    sigma = math.sqrt(mean_square_displacement(ion))
    identity = std_on * math.sqrt(380.0 / 30.0) / sigma

    m = report.metrics
    _metric(m, "x1_std_onres_m", std_on, "m", "fig2cd_onres.csv")
    _metric(m, "x1_std_detuned_m", std_off, "m", "fig2cd_detuned.csv")
    _metric(m, "bandwidth_identity_ratio", identity, "", "fig2cd_onres.csv")
    tol = 0.35 if fast else 0.20
    e = report.expectations
    _expect(e, "x1_std_onres_m", std_on, 15e-9 * (1 - tol), 15e-9 * (1 + tol),
            "m")
    _expect(e, "x1_std_detuned_m", std_off, 7e-9 * (1 - tol), 7e-9 * (1 + tol),
            "m")
    _expect(e, "bandwidth_identity_ratio", identity, 1 - tol, 1 + tol, "")
    return art


def _run_fig3a(scenario: Scenario, out_dir: str, fast: bool,
               report: ExperimentReport):
    art_on = execute_scenario(scenario, out_dir, "fig3a_on")
    scen_off = _apply_overrides(scenario, {"loop": {"gain": 0.0}}, None)
    art_off = execute_scenario(scen_off, out_dir, "fig3a_off")
    for k, v in art_on["files"].items():
        report.files[f"on_{k}"] = v
    for k, v in art_off["files"].items():
        report.files[f"off_{k}"] = v
    rec_on, rec_off = art_on["record"], art_off["record"]
    report.files["closed_loop"] = ionio.write_closed_loop_csv(
        rec_on, os.path.join(out_dir, "fig3a_closed_loop.csv"))

    f_lo = scenario.loop.reference.frequency
    psd_on, psd_off = art_on["welch"], art_off["welch"]
    band = phase_noise_suppression_band(rec_on, rec_off,
                                        segment_len=int(scenario.analyses[0]["segment_len"]))
    peak = central_peak_fraction(psd_on, f_lo, 3000.0)
    p_on = motional_band_power(psd_on, f_lo, 3000.0)
    p_off = motional_band_power(psd_off, f_lo, 3000.0)
    ratio = p_on / p_off

    # lock quality: circular variance of the vector-averaged quadrature phase
    q = rec_on.quadratures
    n0 = int(dsp.settle_time(q.filter_spec) * q.fs)
    ph = np.arctan2(q.x2[n0:], q.x1[n0:])
    w = max(1, int(0.1 * q.fs))
    nwin = len(ph) // w
    cw = np.cos(ph[: nwin * w]).reshape(nwin, w).mean(axis=1)
    sw = np.sin(ph[: nwin * w]).reshape(nwin, w).mean(axis=1)
    phw = np.arctan2(sw, cw)
    circ_var = 1.0 - math.hypot(float(np.cos(phw).mean()),
                                float(np.sin(phw).mean()))

    m = report.metrics
    _metric(m, "suppression_band_hz", band, "Hz", "fig3a_on_welch.csv")
    _metric(m, "central_peak_fraction", peak, "", "fig3a_on_welch.csv")
    _metric(m, "band_energy_ratio", ratio, "", "fig3a_on_welch.csv")
    _metric(m, "lock_circular_variance", circ_var, "rad^2",
            "fig3a_closed_loop.csv")
    _metric(m, "saturation_duty_max", rec_on.metadata["saturation_duty_max"],
            "", "fig3a_closed_loop.csv")
    e = report.expectations
    nyquist = 0.5 / rec_on.counts.bin_dt
    _expect(e, "suppression_band_hz", band, 300.0 if fast else 500.0,
            nyquist, "Hz")
    _expect(e, "central_peak_fraction", peak, 0.05, 0.25, "")
    _expect(e, "band_energy_ratio", ratio, 0.7 if fast else 0.8,
            1.3 if fast else 1.2, "")
    _expect(e, "lock_circular_variance", circ_var, 0.0, 0.1, "rad^2")
    _expect(e, "saturation_duty_max", rec_on.metadata["saturation_duty_max"],
            0.0, 0.5, "")
    art_on["record_off"] = rec_off
    art_on["psd_off"] = psd_off
    return art_on


def _run_fig3b(scenario: Scenario, out_dir: str, fast: bool,
               report: ExperimentReport):
    art = execute_scenario(scenario, out_dir, "fig3b")
    report.files.update(art["files"])
    psd_on = art["welch"]
    f_lo = scenario.loop.reference.frequency
    # residual displacement floor away from the motional band
    d = np.abs(psd_on.freqs - f_lo)
    mask = (d > 10e3) & (d < 100e3)
    floor_rate = float(np.median(psd_on.values[mask]))
    floor_m = floor_rate * displacement_psd_scale(scenario.det)
    res, ratio = dsp.resolution_metric(floor_m, 1.0, scenario.ion)
    m = report.metrics
    _metric(m, "residual_floor_m2_hz", floor_m, "m^2/Hz", "fig3b_welch.csv")
    _metric(m, "resolution_1hz_m", res, "m", "fig3b_welch.csv")
    _metric(m, "resolution_1hz_sql_ratio", ratio, "", "fig3b_welch.csv")
    e = report.expectations
    _expect(e, "resolution_1hz_sql_ratio", ratio, 0.0, 0.5, "")
    return art


def _run_fig3c(scenario: Scenario, out_dir: str, fast: bool,
               report: ExperimentReport):
    art = execute_scenario(scenario, out_dir, "fig3c")
    report.files.update(art["files"])
    zoom = art["g2"]
    ref = scenario.loop.reference
    f_lo, f_mod = ref.frequency, ref.mod_frequency

    def band_peak(f_center, half=20.0):
        mask = np.abs(zoom.freqs - f_center) <= half
        if not np.any(mask):
            raise AnalysisError(f"band at {f_center} Hz outside the zoom span")
        i = int(np.argmax(zoom.values[mask]))
        return float(zoom.freqs[mask][i]), float(
            dsp.tone_power(zoom, zoom.freqs[mask][i], width=3 * zoom.rbw))

    f_c, p_c = band_peak(f_lo)
    f_p, p_p = band_peak(f_lo + f_mod)
    f_m, p_m = band_peak(f_lo - f_mod)
    side_ratio = 0.5 * (p_p + p_m) / p_c
    bessel = 0.330716  # J1(1)^2 / J0(1)^2

    m = report.metrics
    _metric(m, "carrier_offset_hz", f_c - f_lo, "Hz", "fig3c_g2.csv")
    _metric(m, "upper_sideband_offset_hz", f_p - (f_lo + f_mod), "Hz",
            "fig3c_g2.csv")
    _metric(m, "lower_sideband_offset_hz", f_m - (f_lo - f_mod), "Hz",
            "fig3c_g2.csv")
    _metric(m, "sideband_carrier_ratio", side_ratio, "", "fig3c_g2.csv")
    e = report.expectations
    rbw = zoom.rbw
    _expect(e, "carrier_offset_hz", abs(f_c - f_lo), 0.0, rbw, "Hz")
    _expect(e, "upper_sideband_offset_hz", abs(f_p - (f_lo + f_mod)), 0.0,
            rbw, "Hz")
    _expect(e, "lower_sideband_offset_hz", abs(f_m - (f_lo - f_mod)), 0.0,
            rbw, "Hz")
    tol = 0.35 if fast else 0.20
    _expect(e, "sideband_carrier_ratio", side_ratio, bessel * (1 - tol),
            bessel * (1 + tol), "")
    return art


def _run_fig3d(scenario: Scenario, out_dir: str, fast: bool,
               report: ExperimentReport):
    art = execute_scenario(scenario, out_dir, "fig3d")
    report.files.update(art["files"])
    zoom = art["g2"]
    f_lo = scenario.loop.reference.frequency
    width = dsp.line_width_bins(zoom, f_peak=f_lo, window=200.0)
    m = report.metrics
    _metric(m, "line_rbw_hz", zoom.rbw, "Hz", "fig3d_g2.csv")
    _metric(m, "line_width_bins", width, "bins", "fig3d_g2.csv")
    e = report.expectations
    _expect(e, "line_width_bins", width, 1, 2, "bins")
    return art


def _build_preset(name: str, fast: bool, seed) -> Scenario:
    if name not in _PRESET_SEEDS:
        raise ConfigurationError(
            f"unknown experiment {name!r}; expected one of {PRESET_NAMES}"
        )
    base_seed = _PRESET_SEEDS[name] if seed is None else int(seed)
    f0_hz = IonParams().omega0 / _TWO_PI
    if name in ("fig2a", "fig2b"):
        return _fig2_record_scenario(fast, base_seed)
    if name == "fig2cd":
        s = _fig2_record_scenario(fast, base_seed)
        analyses = (
            {"kind": "lockin", "f_lo_hz": f0_hz, "order": 4, "cutoff_hz": 20.0,
             "out_fs_hz": 2500.0, "lo_phase_rad": 0.0, "label": "onres"},
            {"kind": "lockin", "f_lo_hz": f0_hz + _QUAD_DETUNING_HZ, "order": 4,
             "cutoff_hz": 20.0, "out_fs_hz": 2500.0, "lo_phase_rad": 0.0,
             "label": "detuned"},
        )
        return replace(s, drive=None, bin_dt=2e-7, analyses=analyses)
    if name in ("fig3a", "fig3b"):
        return _fig3_scenario(fast, base_seed, DEFAULT_LOOP_GAIN,
                              ReferenceSignal.sine(f0_hz))
    if name == "fig3c":
        s = _fig3_scenario(fast, base_seed, DEFAULT_LOOP_GAIN,
                           ReferenceSignal.fm(f0_hz))
        zoom = {"kind": "g2", "max_lag_s": 0.75 if fast else 1.0,
                "center_hz": 1.0386e6, "span_hz": 4000.0, "skip_s": 0.5}
        return replace(s, analyses=s.analyses + (zoom,))
    # name == "fig3d" is the only case left after the guard above
    s = _fig3_scenario(fast, base_seed, DEFAULT_LOOP_GAIN,
                       ReferenceSignal.sine(f0_hz))
    max_lag = 2.0 if fast else 20.0
    zoom = {"kind": "g2", "max_lag_s": max_lag, "center_hz": 1.0386e6,
            "span_hz": 4000.0, "skip_s": 0.0}
    return replace(s, analyses=s.analyses + (zoom,))


_PRESET_RUNNERS = {
    "fig2a": _run_fig2a, "fig2b": _run_fig2b, "fig2cd": _run_fig2cd,
    "fig3a": _run_fig3a, "fig3b": _run_fig3b, "fig3c": _run_fig3c,
    "fig3d": _run_fig3d,
}


def default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV, os.path.join(os.getcwd(), "ionlock_out"))


def run_experiment(name: str, overrides=None, out_dir=None, *, seed=None,
                   fast: bool = False, render: bool = False) -> ExperimentReport:
    """Run a named figure preset and write its data files and report.

    overrides is an optional scenario fragment (nested dict in schema keys)
    merged over the preset before validation; seed is shorthand for
    {"seed": ...}. fast shrinks the records from 20 s to 2 s and widens the
    statistical expectation bands accordingly. render additionally writes
    PNG plots (the CSV data path never depends on the plotting backend).
    """
    if name not in PRESET_NAMES:
        raise ConfigurationError(
            f"unknown experiment {name!r}; expected one of {PRESET_NAMES}"
        )
    out_dir = os.fspath(out_dir) if out_dir is not None else default_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    scenario = _build_preset(name, fast, seed)
    scenario = _apply_overrides(scenario, overrides, None)
    report = ExperimentReport(name=name, scenario_hash=scenario_hash(scenario),
                              fast=fast)
    t0 = time.perf_counter()
    report.files["scenario"] = ionio.atomic_write_text(
        os.path.join(out_dir, f"{name}_scenario.yaml"),
        serialize_scenario(scenario))
    art = _PRESET_RUNNERS[name](scenario, out_dir, fast, report)
    report.runtime_s = time.perf_counter() - t0
    report.files["report_txt"] = ionio.atomic_write_text(
        os.path.join(out_dir, f"{name}_report.txt"),
        export_report(report, "text"))
    report.files["report_json"] = ionio.atomic_write_text(
        os.path.join(out_dir, f"{name}_report.json"),
        export_report(report, "structured"))
    if render:
        _render(name, scenario, art, out_dir, report)
    return report


def _render(name: str, scenario: Scenario, art: dict, out_dir: str,
            report: ExperimentReport):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    if name in ("fig2a", "fig2b"):
        psd = art["welch"]
        sel = slice(1, None)
        ax.loglog(psd.freqs[sel], psd.values[sel], lw=0.6)
        if "fit" in art:
            ax.loglog(psd.freqs[sel], art["fit"].value(psd.freqs[sel]), "r--")
        ax.set_xlabel("frequency (Hz)")
        ax.set_ylabel(f"PSD ({psd.units})")
    elif name == "fig2cd":
        for label in ("onres", "detuned"):
            q = art[label]
            ax.plot(q.times(), q.x1 * 1e9, lw=0.7, label=label)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("X1 (nm)")
        ax.legend()
    elif name in ("fig3a", "fig3b"):
        psd_on = art["welch"]
        f_lo = scenario.loop.reference.frequency
        m = np.abs(psd_on.freqs - f_lo) < 3000
        ax.semilogy(psd_on.freqs[m] - f_lo, psd_on.values[m], label="locked")
        if "psd_off" in art:
            off = art["psd_off"]
            ax.semilogy(off.freqs[m] - f_lo, off.values[m], label="free")
        ax.set_xlabel("offset from reference (Hz)")
        ax.set_ylabel("rate PSD")
        ax.legend()
    else:
        zoom = art["g2"]
        f_lo = scenario.loop.reference.frequency
        ax.semilogy(zoom.freqs - f_lo, zoom.values, lw=0.7)
        ax.set_xlabel("offset from reference (Hz)")
        ax.set_ylabel("rate PSD")
    ax.set_title(name)
    fig.tight_layout()
    png = os.path.join(out_dir, f"{name}.png")
    fig.savefig(png, dpi=120)
    plt.close(fig)
    report.files["plot"] = png
