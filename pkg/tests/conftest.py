from __future__ import annotations

import numpy as np
import pytest

from varprof.profile import BlockProfile, GridProfile, discretize

ACCEPTANCE_LINES: list[str] = []


def semicircle() -> BlockProfile:
    return BlockProfile([[1.0]], [1.0])


def off_diagonal() -> BlockProfile:
    return BlockProfile([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5])


def random_three_block(seed: int = 7) -> BlockProfile:
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 1.5, size=(3, 3))
    return BlockProfile(0.5 * (a + a.T), [0.2, 0.3, 0.5])


def block_diagonal() -> BlockProfile:
    return BlockProfile([[1.0, 0.0], [0.0, 2.0]], [0.3, 0.7])


def discretized_grid() -> BlockProfile:
    g = GridProfile.from_function(lambda x, y: 1.0 + 0.5 * (x + y), 256)
    return discretize(g, 8)


def concave_two_block() -> BlockProfile:
    return BlockProfile([[1.0, 1.5], [1.5, 1.2]], [0.4, 0.6])


@pytest.fixture
def sc() -> BlockProfile:
    return semicircle()


@pytest.fixture
def concave2() -> BlockProfile:
    return concave_two_block()


@pytest.fixture
def record():
    """Store a one-line acceptance verdict printed at the end of the run."""

    def _record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter) -> None:
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
