import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance: dict = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion; returns whether it passed."""

    def record(number, passed, detail):
        _acceptance[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        passed, detail = _acceptance[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}")
