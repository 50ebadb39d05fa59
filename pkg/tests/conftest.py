import numpy as np
import pytest

from bsq.spectral import PhysParams, default_alphas

ACCEPTANCE_LINES: list[str] = []


def record(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def params():
    return PhysParams(1.0, 0.7, 1.3, default_alphas())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
