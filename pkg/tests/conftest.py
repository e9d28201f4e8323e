import numpy as np
import pytest

from ionlock.control import LoopConfig, ReferenceSignal, run_closed_loop
from ionlock.detection import DetectionParams, sample_counts
from ionlock.oscillator import IonParams, stream_trajectory

# registry of "CRITERION n: PASS/FAIL" lines filled in by test_acceptance
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def thermal_counts():
    """2 s free-running count record at defaults (linear fringe, 50 ns bins).

    Shared by the spectrum/lock-in tests; ~5 s to build, so session scoped.
    """
    ion = IonParams()
    det = DetectionParams(transduction="linear")
    chunks = stream_trajectory(ion, None, duration=2.0, dt=25e-9, seed=31415)
    return sample_counts(chunks, det, bin_dt=5e-8, seed=31416)


@pytest.fixture(scope="session")
def loop_record():
    """1 s locked record at the default gain (sine reference on resonance)."""
    ion = IonParams()
    det = DetectionParams()
    loop = LoopConfig(reference=ReferenceSignal.sine(ion.omega0 / (2 * np.pi)))
    return run_closed_loop(ion, det, loop, duration=1.0, seed=2718)
