import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

X = np.array([1.0, 0.5, -0.3])
Y_STAR = np.array([0.5, -1.0, 0.2])


@pytest.fixture
def x():
    return X.copy()


@pytest.fixture
def y_star():
    return Y_STAR.copy()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def report(criterion: int, ok: bool, detail: str, soft: bool = False):
    status = ("PASS" if ok else "MISS") if soft else ("PASS" if ok else "FAIL")
    tag = " (soft)" if soft else ""
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:2d}{tag}: {status}  {detail}"
    print(ACCEPTANCE_LINES[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for c in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[c])
