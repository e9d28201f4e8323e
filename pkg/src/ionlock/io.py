"""File formats and atomic persistence.

All writers follow write-temp-then-rename so a crashed run never leaves a
truncated file behind, and all floating-point output is fixed at 12
significant digits so identical runs produce byte-identical files.

CSV layouts:

* trajectory       ``t_s,x_m``
* counts           ``t_s,counts``        (frame-summed when frame_dt is set)
* PSD              ``f_hz,density,units``
* quadratures      ``t_s,x1_m,x2_m``
* closed loop      ``t_s,counts,x1_m,x2_m,trap_freq_rad_s,error_m``

Every file starts with a ``# ionlock-schema: N`` comment; loaders refuse
other versions. Full-rate count records go to npz (a 1e8-bin CSV would be
gigabytes).
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .constants import SCENARIO_SCHEMA_VERSION
from .detection import CountSeries
from .dsp import PsdEstimate, QuadratureRecord
from .errors import ConfigurationError
from .oscillator import Trajectory

_SCHEMA_COMMENT = f"# ionlock-schema: {SCENARIO_SCHEMA_VERSION}\n"


def _fmt(x: float) -> str:
    """12-significant-digit, locale-independent float formatting."""
    return format(float(x), ".11e")


def atomic_write_text(path, text: str) -> str:
    """Write text to path via a temp file + rename; returns the path."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ionlock-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return path


def atomic_write_bytes(path, payload: bytes) -> str:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ionlock-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return path


def _csv(header: str, columns, formats=None) -> str:
    columns = [np.asarray(c) for c in columns]
    n = len(columns[0])
    if formats is None:
        formats = [_fmt] * len(columns)
    lines = [_SCHEMA_COMMENT, header + "\n"]
    for i in range(n):
        lines.append(",".join(f(c[i]) for f, c in zip(formats, columns)) + "\n")
    return "".join(lines)


def write_trajectory_csv(traj: Trajectory, path, decimate: int = 1) -> str:
    """``t_s,x_m`` rows, optionally strided for long records."""
    if decimate < 1:
        raise ConfigurationError("decimate must be >= 1")
    x = traj.x_samples[::decimate]
    t = traj.start_time + traj.dt * decimate * np.arange(len(x))
    return atomic_write_text(path, _csv("t_s,x_m", (t, x)))


def write_counts_csv(series: CountSeries, path, frame_dt: float | None = None) -> str:
    """``t_s,counts`` rows; frame_dt sums bins into frames for long records.

    Timestamps are frame centers; a trailing partial frame is dropped.
    """
    if frame_dt is None:
        counts = series.counts
        t = series.times()
    else:
        k = int(round(frame_dt / series.bin_dt))
        if k < 1 or abs(frame_dt - k * series.bin_dt) > 1e-9 * frame_dt:
            raise ConfigurationError(
                f"frame_dt ({frame_dt}) must be an integer multiple of the "
                f"bin width ({series.bin_dt})"
            )
        n = (len(series) // k) * k
        counts = series.counts[:n].reshape(-1, k).sum(axis=1, dtype=np.int64)
        t = series.start_time + frame_dt * (np.arange(len(counts)) + 0.5)
    return atomic_write_text(
        path, _csv("t_s,counts", (t, counts), formats=[_fmt, lambda v: str(int(v))])
    )


def write_counts_npz(series: CountSeries, path) -> str:
    """Full-rate binary count record (lossless round-trip)."""
    import io as _io

    buf = _io.BytesIO()
    np.savez_compressed(
        buf, schema=np.int64(SCENARIO_SCHEMA_VERSION), counts=series.counts,
        bin_dt=np.float64(series.bin_dt), start_time=np.float64(series.start_time),
    )
    return atomic_write_bytes(path, buf.getvalue())


def read_counts_npz(path) -> CountSeries:
    with np.load(path) as z:
        if int(z["schema"]) != SCENARIO_SCHEMA_VERSION:
            raise ConfigurationError(
                f"count file schema {int(z['schema'])} does not match "
                f"this package's schema {SCENARIO_SCHEMA_VERSION}"
            )
        return CountSeries(bin_dt=float(z["bin_dt"]), counts=z["counts"],
                           start_time=float(z["start_time"]))


def write_trajectory_npz(traj: Trajectory, path) -> str:
    import io as _io

    buf = _io.BytesIO()
    np.savez_compressed(
        buf, schema=np.int64(SCENARIO_SCHEMA_VERSION), x=traj.x_samples,
        dt=np.float64(traj.dt), start_time=np.float64(traj.start_time),
        seed=np.int64(-1 if traj.seed is None else traj.seed),
    )
    return atomic_write_bytes(path, buf.getvalue())


def read_trajectory_npz(path) -> Trajectory:
    with np.load(path) as z:
        if int(z["schema"]) != SCENARIO_SCHEMA_VERSION:
            raise ConfigurationError(
                f"trajectory file schema {int(z['schema'])} does not match "
                f"this package's schema {SCENARIO_SCHEMA_VERSION}"
            )
        seed = int(z["seed"])
        return Trajectory(dt=float(z["dt"]), x_samples=z["x"],
                          start_time=float(z["start_time"]),
                          seed=None if seed < 0 else seed)


def write_psd_csv(est: PsdEstimate, path) -> str:
    units = [est.units] * len(est.freqs)
    text = _csv("f_hz,density,units", (est.freqs, est.values, units),
                formats=[_fmt, _fmt, str])
    return atomic_write_text(path, text)


def write_quadrature_csv(rec: QuadratureRecord, path) -> str:
    return atomic_write_text(
        path, _csv("t_s,x1_m,x2_m", (rec.times(), rec.x1, rec.x2))
    )


def write_timestamps_csv(times, path) -> str:
    """Photon arrival times, one ``t_s`` per row."""
    return atomic_write_text(path, _csv("t_s", (np.asarray(times, float),)))


def write_closed_loop_csv(record, path, frame_dt: float | None = None) -> str:
    """Closed-loop record on a single decimated time base.

    Counts are summed per frame; quadratures must already live on the frame
    grid (the default 0.4 ms lock-in output); trap frequency and error are
    frame means of the actuation record. frame_dt defaults to the
    quadrature sample interval.
    """
    q = record.quadratures
    if q is None:
        raise ConfigurationError(
            "record has no quadratures; rerun with record_quadratures=True"
        )
    if frame_dt is None:
        frame_dt = 1.0 / q.fs
    k = int(round(frame_dt / record.counts.bin_dt))
    if k < 1 or abs(frame_dt - k * record.counts.bin_dt) > 1e-9 * frame_dt:
        raise ConfigurationError(
            f"frame_dt ({frame_dt}) must be an integer multiple of the "
            f"count bin width ({record.counts.bin_dt})"
        )
    if abs(frame_dt * q.fs - 1.0) > 1e-9:
        raise ConfigurationError(
            f"frame_dt ({frame_dt}) must equal the quadrature sample "
            f"interval ({1.0 / q.fs})"
        )
    n_frames = min(len(record.counts) // k, len(q))
    counts = record.counts.counts[: n_frames * k].reshape(-1, k).sum(
        axis=1, dtype=np.int64
    )
    t = record.counts.start_time + frame_dt * (np.arange(n_frames) + 0.5)

    # frame means of the (possibly strided) actuation record
    m = int(round(frame_dt / record.rec_dt))
    if m >= 1 and len(record.trap_freq_series):
        n_ctl = min(len(record.trap_freq_series) // m, n_frames)
        trap = record.trap_freq_series[: n_ctl * m].reshape(-1, m).mean(axis=1)
        err = record.error_signal[: n_ctl * m].reshape(-1, m).mean(axis=1)
        if n_ctl < n_frames:
            pad_t = np.full(n_frames - n_ctl, trap[-1] if n_ctl else np.nan)
            pad_e = np.full(n_frames - n_ctl, err[-1] if n_ctl else np.nan)
            trap = np.concatenate((trap, pad_t))
            err = np.concatenate((err, pad_e))
    else:
        trap = np.full(n_frames, np.nan)
        err = np.full(n_frames, np.nan)

    text = _csv(
        "t_s,counts,x1_m,x2_m,trap_freq_rad_s,error_m",
        (t, counts, q.x1[:n_frames], q.x2[:n_frames], trap, err),
        formats=[_fmt, lambda v: str(int(v)), _fmt, _fmt, _fmt, _fmt],
    )
    return atomic_write_text(path, text)


def write_json(obj, path) -> str:
    """Deterministic (sorted, indented) JSON with a schema field."""
    doc = dict(obj)
    doc.setdefault("schema_version", SCENARIO_SCHEMA_VERSION)
    return atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCENARIO_SCHEMA_VERSION:
        raise ConfigurationError(
            f"file schema {doc.get('schema_version')!r} does not match "
            f"this package's schema {SCENARIO_SCHEMA_VERSION}"
        )
    return doc
