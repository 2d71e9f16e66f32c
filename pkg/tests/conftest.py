import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adaptix.model import DEFAULT_BOUNDS  # noqa: E402


def random_theta(rng, bounds=DEFAULT_BOUNDS, amplitude=(-3.0, -0.3)):
    """Parameters inside the box with a clearly nonzero amplitude."""
    return np.array([
        rng.uniform(-1, 1),
        rng.uniform(*amplitude),
        np.exp(rng.uniform(np.log(0.2), np.log(bounds.upper[2]))),
        rng.uniform(bounds.lower[3], 6.0),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
