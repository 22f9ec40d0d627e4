import numpy as np
import pytest

from spdeinv.fem import FemSpace, build_interval_mesh, build_rect_mesh


@pytest.fixture
def line20():
    return FemSpace(build_interval_mesh(20))


@pytest.fixture
def square4():
    return FemSpace(build_rect_mesh(4, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def report():
    """Record one summary line for an acceptance criterion."""
    def _report(label: str, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
