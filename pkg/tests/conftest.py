import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mcopf import regression  # noqa: E402
from mcopf.netmodel import bundled_case  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CASE = ROOT / "cases" / "two_bus_two_wire.json"


@pytest.fixture(scope="session")
def net():
    return bundled_case()


@pytest.fixture(scope="session")
def ctx():
    """Shared lazily-evaluated solves of the bundled case."""
    return regression.make_context()


@pytest.fixture(scope="session")
def case_path():
    return CASE


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
