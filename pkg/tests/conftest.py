import numpy as np
import pytest

from t1q.phantom import default_spec, make_phantom

ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_phantom():
    spec = default_spec((16, 16, 16), n_nuclei=4, fill=0.5, seed=3)
    return make_phantom(spec, seed=11)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)
