#!/usr/bin/env python3
"""Timing comparison of the compiled and pure-Python loop backends.

Backend selection happens at import time, so each backend runs in its own
interpreter process (IONLOCK_FORCE_FALLBACK=1 forces the pure-Python one)
and reports timings as JSON on stdout; the parent prints the table.

Two workloads:
  free_run      free-running trajectory, 0.1 s at dt = 25 ns (4e6 steps).
                The fallback reformulates the recursion as an AR(2) lfilter,
                so both backends are vectorized and land within ~2x.
  closed_loop   photon-by-photon closed loop, 0.02 s (8e5 steps). The
                fallback is a literal Python transcription of the compiled
                loop (kept bit-identical for tests), so expect a 2-3 order
                of magnitude gap. This is the kernel the extension is for.
"""

import argparse
import json
import math
import os
import subprocess
import sys
import time

FREE_DURATION = 0.1
LOOP_DURATION = 0.02


def run_worker(repeats):
    from ionlock import kernels
    from ionlock.control import LoopConfig, ReferenceSignal, run_closed_loop
    from ionlock.detection import DetectionParams
    from ionlock.oscillator import IonParams, simulate

    ion = IonParams()
    det = DetectionParams()
    loop = LoopConfig(
        reference=ReferenceSignal.sine(ion.omega0 / (2 * math.pi)))

    def free():
        simulate(ion, None, duration=FREE_DURATION, dt=25e-9, seed=7)

    def closed():
        run_closed_loop(ion, det, loop, LOOP_DURATION, 25e-9, seed=7,
                        bin_dt=2e-7, record_quadratures=False)

    result = {"backend": kernels.BACKEND}
    for name, fn in (("free_run", free), ("closed_loop", closed)):
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        result[name] = best
    print(json.dumps(result))


def time_backend(force_fallback, repeats):
    env = os.environ.copy()
    env["IONLOCK_FORCE_FALLBACK"] = "1" if force_fallback else "0"
    out = subprocess.run(
        [sys.executable, os.path.abspath(__file__),
         "--worker", "--repeats", str(repeats)],
        env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3,
                    help="timed runs per workload, best is reported")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        run_worker(args.repeats)
        return

    compiled = time_backend(False, args.repeats)
    fallback = time_backend(True, args.repeats)
    if compiled["backend"] != "compiled":
        print("note: compiled extension not importable; both columns "
              "ran the pure-Python backend")

    steps = {"free_run": int(FREE_DURATION / 25e-9),
             "closed_loop": int(LOOP_DURATION / 25e-9)}
    print(f"{'workload':<14}{'steps':>10}{'compiled':>12}{'fallback':>12}"
          f"{'ratio':>9}")
    for name in ("free_run", "closed_loop"):
        tc, tf = compiled[name], fallback[name]
        print(f"{name:<14}{steps[name]:>10}{tc:>11.4f}s{tf:>11.4f}s"
              f"{tf / tc:>8.1f}x")


if __name__ == "__main__":
    main()
