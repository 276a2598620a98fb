import itertools

import numpy as np
import pytest


def brute_force_w2(x: np.ndarray, y: np.ndarray) -> float:
    """W2 between equal-size uniform measures by enumerating every permutation."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    best = np.inf
    for perm in itertools.permutations(range(len(y))):
        best = min(best, float(np.sum((x - y[list(perm)]) ** 2)))
    return float(np.sqrt(best / len(x)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
