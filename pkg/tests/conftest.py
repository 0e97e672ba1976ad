import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402
from rigidsynth.camgeo import Intrinsics  # noqa: E402
from rigidsynth.solver import solve  # noqa: E402
from rigidsynth.synth import standard_suite  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_K():
    return Intrinsics(fx=100.0, fy=100.0, cx=3.5, cy=3.5, width=8, height=8)


@pytest.fixture(scope="session")
def suite():
    return standard_suite(0)


@pytest.fixture(scope="session")
def suite_solves(suite):
    """Default-option estimates of every suite scene with their wall-clock times, solved one at a time."""
    out = []
    for b in suite:
        t0 = time.perf_counter()
        est = solve(b)
        out.append((est, time.perf_counter() - t0))
    return out


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(acceptance_log.RESULTS):
        ok, detail = acceptance_log.RESULTS[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
