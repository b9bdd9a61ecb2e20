from __future__ import annotations

from pathlib import Path

import pytest

from superclt.scenarios import canonical
from superclt.spectral import build_spectral

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"


@pytest.fixture(scope="session")
def scenario_dir() -> Path:
    return SCENARIO_DIR


@pytest.fixture(scope="session")
def s1():
    return canonical("S1")


@pytest.fixture(scope="session")
def s21():
    return canonical("S2a1")


@pytest.fixture(scope="session")
def s24():
    return canonical("S2a4")


@pytest.fixture(scope="session")
def s25():
    return canonical("S2a5")


@pytest.fixture(scope="session")
def det():
    return canonical("D")


@pytest.fixture(scope="session")
def spec_of():
    cache = {}

    def get(scenario):
        key = scenario.digest()
        if key not in cache:
            cache[key] = build_spectral(scenario)
        return cache[key]

    return get


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def report_criterion(request):
    """Record one pass/fail line per acceptance criterion; shown in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] #{number:<2d} {title}: {detail}"
        request.config.stash[ACCEPTANCE_LINES].append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
