"""Stochastic harmonic oscillator model of the ion's axial motion.

The motion obeys the Langevin equation

    dx = (p/M) dt
    dp = (-M w^2 x - gamma p + F(t)) dt + sqrt(2 M gamma kB T) dW

which is integrated with the *exact* exponential propagator of the linear
system over each step: the state is multiplied by exp(F dt) and receives a
Gaussian increment whose covariance is the exact Ornstein-Uhlenbeck step
covariance. There is no secular drift at any step size; the only
discretization effect is the zero-order hold of the external force and of a
time-varying trap frequency across one step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import (
    DEFAULT_GAMMA,
    DEFAULT_MASS,
    DEFAULT_OMEGA0,
    DEFAULT_TEMPERATURE,
    HBAR,
    KB,
)
from .errors import ConfigurationError, MemoryBudgetError, NumericalFault

# Steps per oscillation period required of the zero-order hold.
MIN_STEPS_PER_PERIOD = 20

# simulate() refuses to materialize more samples than this (1 GiB of float64);
# longer records go through stream_trajectory().
MAX_IN_MEMORY_SAMPLES = 2**27

DEFAULT_CHUNK_STEPS = 2**21


@dataclass(frozen=True)
class IonParams:
    """Mass, trap frequency, cooling rate and bath temperature of the ion.

    The oscillator must be underdamped (gamma < omega0) and the temperature
    non-negative; violations raise ConfigurationError at construction.
    """

    mass: float = DEFAULT_MASS
    omega0: float = DEFAULT_OMEGA0
    gamma: float = DEFAULT_GAMMA
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not (self.mass > 0):
            raise ConfigurationError(f"mass must be positive, got {self.mass}")
        if not (self.omega0 > 0):
            raise ConfigurationError(f"omega0 must be positive, got {self.omega0}")
        if not (0 < self.gamma < self.omega0):
            raise ConfigurationError(
                "gamma must satisfy 0 < gamma < omega0 (underdamped oscillator), "
                f"got gamma={self.gamma}, omega0={self.omega0}"
            )
        if self.temperature < 0:
            raise ConfigurationError(
                f"temperature must be >= 0, got {self.temperature}"
            )


@dataclass
class OscillatorState:
    """Instantaneous mechanical state: displacement, momentum, time."""

    x: float
    p: float
    t: float = 0.0


@dataclass(frozen=True)
class DriveSignal:
    """External force on the ion.

    Three variants: no drive, a sinusoidal force, or an explicit uniformly
    sampled force series (zero outside the provided samples).
    """

    kind: str = "none"
    force_amplitude: float = 0.0   # N
    frequency: float = 0.0         # rad/s
    phase: float = 0.0             # rad
    samples: np.ndarray | None = None
    sample_dt: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "sine", "samples"):
            raise ConfigurationError(f"unknown drive kind {self.kind!r}")
        if self.kind == "sine" and self.force_amplitude < 0:
            raise ConfigurationError("force_amplitude must be >= 0")
        if self.kind == "samples":
            if self.samples is None or self.sample_dt <= 0:
                raise ConfigurationError(
                    "samples drive needs a force array and sample_dt > 0"
                )

    @staticmethod
    def none() -> "DriveSignal":
        return DriveSignal()

    @staticmethod
    def sine(force_amplitude: float, frequency: float, phase: float = 0.0) -> "DriveSignal":
        return DriveSignal("sine", force_amplitude, frequency, phase)

    @staticmethod
    def from_samples(samples, sample_dt: float) -> "DriveSignal":
        return DriveSignal(
            "samples", samples=np.asarray(samples, dtype=float), sample_dt=sample_dt
        )

    def force_at(self, t):
        """Force at time(s) t (zero-order-hold lookup for sampled drives)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "none":
            return np.zeros_like(t)
        if self.kind == "sine":
            return self.force_amplitude * np.cos(self.frequency * t + self.phase)
        idx = np.floor(t / self.sample_dt).astype(np.int64)
        out = np.zeros_like(t)
        ok = (idx >= 0) & (idx < len(self.samples))
        out[ok] = self.samples[idx[ok]]
        return out


@dataclass
class Trajectory:
    """Uniformly sampled displacement record, reproducible from its seed."""

    dt: float
    x_samples: np.ndarray
    start_time: float = 0.0
    seed: int | None = None

    @property
    def duration(self) -> float:
        return len(self.x_samples) * self.dt

    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(len(self.x_samples))


# ---------------------------------------------------------------------------
# exact one-step propagator
# ---------------------------------------------------------------------------

def propagator(params: IonParams, omega_trap: float, dt: float):
    """Exact discrete update for one step of the Langevin system.

    Returns (A, b, L): the 2x2 state transition matrix, the force input
    vector b (state change per newton of constant force over the step), and
    the lower-triangular Cholesky factor of the exact process-noise
    covariance, as flat float tuples
    ``(a11, a12, a21, a22), (b1, b2), (l11, l21, l22)``.
    """
    m = params.mass
    g = params.gamma
    w = omega_trap
    alpha = 0.5 * g
    wd2 = w * w - alpha * alpha
    if wd2 <= 0:
        raise ConfigurationError(
            f"trap frequency {w} rad/s is not underdamped for gamma={g}"
        )
    wd = math.sqrt(wd2)
    e = math.exp(-alpha * dt)
    c = math.cos(wd * dt)
    s = math.sin(wd * dt)

    a11 = e * (c + alpha / wd * s)
    a12 = e * s / (m * wd)
    a21 = -e * m * w * w / wd * s
    a22 = e * (c - alpha / wd * s)

    # b = F^{-1} (A - I) e2 with F the drift matrix; exact ZOH force response
    w2 = w * w
    b1 = -g / w2 * a12 - (a22 - 1.0) / (m * w2)
    b2 = m * a12

    kT = KB * params.temperature
    if kT > 0:
        # stationary covariance is diag(kT/(m w^2), m kT); the step noise
        # covariance is Pinf - A Pinf A^T (exact for the OU process)
        p11 = kT / (m * w2)
        p22 = m * kT
        q11 = p11 - (a11 * a11 * p11 + a12 * a12 * p22)
        q12 = -(a11 * a21 * p11 + a12 * a22 * p22)
        q22 = p22 - (a21 * a21 * p11 + a22 * a22 * p22)
        q11 = max(q11, 0.0)
        l11 = math.sqrt(q11)
        l21 = q12 / l11 if l11 > 0 else 0.0
        l22 = math.sqrt(max(q22 - l21 * l21, 0.0))
    else:
        l11 = l21 = l22 = 0.0

    return (a11, a12, a21, a22), (b1, b2), (l11, l21, l22)


def max_step(omega_trap: float) -> float:
    """Largest integrator step honouring the zero-order-hold precondition."""
    return 2 * math.pi / (MIN_STEPS_PER_PERIOD * omega_trap)


def _check_dt(dt: float, omega_trap: float):
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if dt > max_step(omega_trap) * (1 + 1e-12):
        raise ConfigurationError(
            f"dt={dt:.3e} s too large for omega_trap={omega_trap:.6e} rad/s; "
            f"need dt <= {max_step(omega_trap):.3e} s "
            f"({MIN_STEPS_PER_PERIOD} steps per period)"
        )


def step(
    state: OscillatorState,
    params: IonParams,
    force: float = 0.0,
    omega_trap: float | None = None,
    dt: float = 0.0,
    rng: np.random.Generator | None = None,
) -> OscillatorState:
    """Advance the state by one exact stochastic step.

    force is held constant across the step; omega_trap (default
    params.omega0) is the trap frequency during the step. rng supplies the
    two standard-normal draws; it may be omitted only at zero temperature.
    """
    if not (math.isfinite(state.x) and math.isfinite(state.p)):
        raise NumericalFault(f"non-finite oscillator state: x={state.x}, p={state.p}")
    w = params.omega0 if omega_trap is None else omega_trap
    _check_dt(dt, w)

    (a11, a12, a21, a22), (b1, b2), (l11, l21, l22) = propagator(params, w, dt)
    x = a11 * state.x + a12 * state.p + b1 * force
    p = a21 * state.x + a22 * state.p + b2 * force
    if params.temperature > 0:
        if rng is None:
            raise ConfigurationError("rng required when temperature > 0")
        n1, n2 = rng.standard_normal(2)
        x += l11 * n1
        p += l21 * n1 + l22 * n2
    if not (math.isfinite(x) and math.isfinite(p)):
        raise NumericalFault("oscillator state became non-finite")
    return OscillatorState(x=x, p=p, t=state.t + dt)


# ---------------------------------------------------------------------------
# record generation
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryChunk:
    """One chunk of a streamed trajectory."""

    start_time: float
    dt: float
    x: np.ndarray
    index: int = 0


def _force_array(drive: DriveSignal | None, start_time: float, offset: int,
                 n: int, dt: float):
    """ZOH force per step, evaluated at step midpoints (None if all zero).

    Midpoint times are computed from the global step index so the values
    (and hence the trajectory) are bit-identical for any chunking.
    """
    if drive is None or drive.kind == "none":
        return None
    if drive.kind == "sine" and drive.force_amplitude == 0.0:
        return None
    t_mid = start_time + dt * (np.arange(offset, offset + n) + 0.5)
    return np.asarray(drive.force_at(t_mid), dtype=float)


def stream_trajectory(
    params: IonParams,
    drive: DriveSignal | None = None,
    duration: float = 0.0,
    dt: float = 0.0,
    seed: int = 0,
    start_time: float = 0.0,
    initial_state: OscillatorState | None = None,
    chunk_steps: int = DEFAULT_CHUNK_STEPS,
    omega_trap_series=None,
):
    """Yield TrajectoryChunk objects covering `duration` without ever
    materializing the whole record.

    Sampling convention: sample i is the state after step i, i.e. at time
    start_time + (i+1) dt. omega_trap_series, if given, must supply one trap
    frequency per step (array-like); it forces the slow per-segment path and
    is intended for tests -- closed-loop runs use ``control.run_closed_loop``.
    """
    from . import kernels  # deferred: the extension import is optional

    _check_dt(dt, params.omega0)
    n_total = int(round(duration / dt))
    ss = np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.PCG64(ss))

    if initial_state is not None:
        z = np.array([initial_state.x, initial_state.p], dtype=float)
    elif params.temperature > 0:
        # draw from the stationary thermal distribution
        sx = math.sqrt(KB * params.temperature / (params.mass * params.omega0**2))
        sp = math.sqrt(params.mass * KB * params.temperature)
        z = rng.standard_normal(2) * np.array([sx, sp])
    else:
        z = np.zeros(2)

    if omega_trap_series is not None:
        omega_trap_series = np.asarray(omega_trap_series, dtype=float)
        if len(omega_trap_series) != n_total:
            raise ConfigurationError(
                "omega_trap_series must provide one value per step "
                f"({n_total}), got {len(omega_trap_series)}"
            )

    A, b, L = propagator(params, params.omega0, dt)
    done = 0
    index = 0
    while done < n_total:
        n = min(chunk_steps, n_total - done)
        t0 = start_time + done * dt
        normals = rng.standard_normal((n, 2)) if params.temperature > 0 else None
        force = _force_array(drive, start_time, done, n, dt)
        if omega_trap_series is None:
            x, z = kernels.free_run(A, b, L, z, n, normals, force)
        else:
            x, z = _variable_omega_segment(
                params, omega_trap_series[done : done + n], dt, z, normals, force
            )
        yield TrajectoryChunk(start_time=t0, dt=dt, x=x, index=index)
        done += n
        index += 1


def _variable_omega_segment(params, omegas, dt, z, normals, force):
    """Reference path for per-step trap-frequency variation (slow)."""
    n = len(omegas)
    x_out = np.empty(n)
    z = z.copy()
    for i in range(n):
        A, b, L = propagator(params, omegas[i], dt)
        f = 0.0 if force is None else force[i]
        x = A[0] * z[0] + A[1] * z[1] + b[0] * f
        p = A[2] * z[0] + A[3] * z[1] + b[1] * f
        if normals is not None:
            x += L[0] * normals[i, 0]
            p += L[1] * normals[i, 0] + L[2] * normals[i, 1]
        z[0], z[1] = x, p
        x_out[i] = x
    return x_out, z


def simulate(
    params: IonParams,
    drive: DriveSignal | None = None,
    omega_trap_series=None,
    duration: float = 0.0,
    dt: float = 0.0,
    seed: int = 0,
    start_time: float = 0.0,
    initial_state: OscillatorState | None = None,
) -> Trajectory:
    """Simulate and materialize a displacement record.

    Deterministic for a fixed (params, drive, seed). Records longer than
    MAX_IN_MEMORY_SAMPLES raise MemoryBudgetError; use stream_trajectory()
    for those.
    """
    if duration < 0:
        raise ConfigurationError("duration must be >= 0")
    n_total = int(round(duration / dt)) if duration else 0
    if n_total == 0:
        return Trajectory(dt=dt, x_samples=np.empty(0), start_time=start_time, seed=seed)
    if n_total > MAX_IN_MEMORY_SAMPLES:
        raise MemoryBudgetError(
            f"{n_total} samples exceed the in-memory budget of "
            f"{MAX_IN_MEMORY_SAMPLES}; iterate over stream_trajectory() instead"
        )
    x = np.empty(n_total)
    pos = 0
    for chunk in stream_trajectory(
        params,
        drive,
        duration,
        dt,
        seed,
        start_time,
        initial_state,
        omega_trap_series=omega_trap_series,
    ):
        x[pos : pos + len(chunk.x)] = chunk.x
        pos += len(chunk.x)
    return Trajectory(dt=dt, x_samples=x, start_time=start_time, seed=seed)


# ---------------------------------------------------------------------------
# analytic references
# ---------------------------------------------------------------------------

def analytic_psd(params: IonParams, f):
    """One-sided displacement spectral density (m^2/Hz) at frequency f (Hz).

    Fluctuation-dissipation form for the damped thermal oscillator,

        S_x(f) = 4 kB T gamma / M / ((w0^2 - w^2)^2 + gamma^2 w^2),  w = 2 pi f,

    normalized so that the integral over f in [0, inf) is the mean-square
    displacement kB T / (M w0^2).
    """
    w = 2 * np.pi * np.asarray(f, dtype=float)
    num = 4 * KB * params.temperature * params.gamma / params.mass
    return num / ((params.omega0**2 - w**2) ** 2 + (params.gamma * w) ** 2)


def mean_square_displacement(params: IonParams) -> float:
    """Equipartition mean-square displacement kB T / (M w0^2)."""
    return KB * params.temperature / (params.mass * params.omega0**2)


def sql_displacement(mass: float = DEFAULT_MASS, omega0: float = DEFAULT_OMEGA0) -> float:
    """Zero-point (standard-quantum-limit) position spread sqrt(hbar/(2 M w0))."""
    if mass <= 0 or omega0 <= 0:
        raise ConfigurationError("mass and omega0 must be positive")
    return math.sqrt(HBAR / (2 * mass * omega0))


def doppler_temperature(linewidth: float) -> float:
    """Doppler cooling limit hbar*Gamma/(2 kB) for transition linewidth Gamma (rad/s)."""
    if linewidth <= 0:
        raise ConfigurationError("linewidth must be positive")
    return HBAR * linewidth / (2 * KB)


def thermal_state(params: IonParams, rng: np.random.Generator) -> OscillatorState:
    """Draw an (x, p) sample from the stationary thermal distribution."""
    sx = math.sqrt(mean_square_displacement(params))
    sp = math.sqrt(params.mass * KB * params.temperature)
    n = rng.standard_normal(2)
    return OscillatorState(x=sx * n[0], p=sp * n[1])
