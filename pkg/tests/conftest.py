import numpy as np
import pytest

from voxnet.data import generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Six volumes per class at cube 16, separable."""
    return generate_synthetic(6, ("AD", "NC"), cube=16, separability=1.0, seed=3)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    def report(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
