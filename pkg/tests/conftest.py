import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

sys.path.insert(0, str(Path(__file__).parent))

from sitmle.data import Sample  # noqa: E402


def make_dataset(n=20, seed=11, beta=1.0):
    """Small draw from the simulation design, reused as a fixed test dataset."""
    rng = np.random.default_rng(seed)
    w = np.round(rng.normal(size=n), 3)
    a = (rng.random(n) < expit(w)).astype(int)
    a[0], a[1] = 0, 1  # never degenerate
    y = np.round(a * w * (1 - beta * a.mean()) + rng.normal(size=n), 3)
    return Sample(w[:, None], a, y, ("w",))


@pytest.fixture
def sample20():
    return make_dataset()


@pytest.fixture
def sample500():
    return make_dataset(500, seed=5)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
