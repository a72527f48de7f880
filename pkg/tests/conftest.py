import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cfiot import RadioConfig, compute_stats, generate_scenario

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_solver_warnings():
    # cvxpy warns about inaccurate solves; every solver output is re-verified.
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", category=UserWarning, module="cvxpy")
        warnings.filterwarnings("ignore", category=FutureWarning, module="cvxpy")
        yield


@pytest.fixture
def small_scn():
    return generate_scenario(12, 4, 300.0, RadioConfig(tau=4), rng=7)


@pytest.fixture
def small_stats(small_scn):
    return compute_stats(small_scn)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion_report():
    """Record one pass/fail line per acceptance criterion and assert it."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
