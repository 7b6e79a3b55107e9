import time

import numpy as np
import pytest

from ma_mesh import LinSolveConfig, MonitorSpec, SolverConfig, build_uniform_mesh, run
from ma_mesh.mesh import min_image

# Criterion id -> (passed, detail); filled by tests/test_acceptance.py and
# printed at the end of the session.
ACCEPTANCE = {}


# (algorithm, monitor, n, options) -> (RunResult, wall seconds)
RUNS = {}


def solve_once(algorithm, monitor, n, **options):
    """Run a solve once per session; identical requests share the result."""
    key = (algorithm, monitor, n, tuple(sorted(options.items())))
    if key not in RUNS:
        opts = dict(options)
        correctors = opts.pop("correctors", None)
        if correctors is not None:
            opts["linear"] = LinSolveConfig(correctors=correctors)
        t0 = time.perf_counter()
        result = run(SolverConfig(algorithm, **opts), MonitorSpec.preset(monitor), n)
        RUNS[key] = (result, time.perf_counter() - t0)
    return RUNS[key][0]


def run_seconds(algorithm, monitor, n, **options):
    return RUNS[(algorithm, monitor, n, tuple(sorted(options.items())))][1]


def corner_distance(a, b):
    """Max minimum-image distance between the physical corners of two runs."""
    d = min_image(a.pair.physical.corners - b.pair.physical.corners)
    return float(np.linalg.norm(d, axis=-1).max())


@pytest.fixture
def mesh8():
    return build_uniform_mesh(8)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
