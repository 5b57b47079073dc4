import numpy as np
import pytest

from geneic.backend import build_toy_backend

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def bundle():
    b = build_toy_backend(0)
    before = b.digest()
    yield b
    # frozen-backend law over the whole suite
    assert b.digest() == before


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records and prints a pass/fail line."""
    def record(n, title, ok, detail=""):
        line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
