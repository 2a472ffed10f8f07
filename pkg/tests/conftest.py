from pathlib import Path

import pytest

from tsclab.netmodel import synth_grid
from tsclab.observe import IntersectionObservation

FIXTURES = Path(__file__).parent / "fixtures"

# Queue and segment counts of the reference prompt, (first, second) per phase
# in East/West or North/South order.
REFERENCE_QUEUED = {"ETWT": (1, 4), "NTST": (2, 0), "ELWL": (0, 0), "NLSL": (4, 3)}
REFERENCE_SEGMENTS = {
    "ETWT": [(0, 0), (0, 2), (2, 1)],
    "NTST": [(1, 0), (1, 0), (4, 1)],
    "ELWL": [(0, 0), (0, 0), (0, 1)],
    "NLSL": [(0, 0), (0, 0), (1, 2)],
}


def reference_obs(**kw) -> IntersectionObservation:
    return IntersectionObservation.from_counts(REFERENCE_QUEUED, REFERENCE_SEGMENTS, **kw)


@pytest.fixture
def ref_obs():
    return reference_obs()


@pytest.fixture
def golden_prompt() -> str:
    return (FIXTURES / "reference_prompt.txt").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def grid11():
    return synth_grid(1, 1, 300.0)


@pytest.fixture(scope="session")
def grid22():
    return synth_grid(2, 2, 300.0)


# Verdict lines from the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
