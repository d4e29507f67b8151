from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from svpic import _parallel

settings.register_profile("svpic", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("svpic")


@pytest.fixture(autouse=True)
def _serial_threads():
    _parallel.set_threads(1)
    yield
    _parallel.set_threads(1)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[cid])
